use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use serde_json::{json, Map, Value};

use super::{check_envelope, field, read_text, typed, write_text, DOC_VERSION};
use crate::distill::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::fitting::{Anchors, LandmarkSpec, Region};
use crate::metrics::{AreBlock, Line, MetricsReport, Provenance};
use crate::model::ParamVector;
use crate::regressor::DecoderWeights;
use crate::synthetic::Sample;

pub const FORMAT_LANDMARKS: &str = "vox3d.landmark_spec";
pub const FORMAT_ARRAY: &str = "vox3d.array";
pub const FORMAT_PARAMS: &str = "vox3d.params";
pub const FORMAT_REPORT: &str = "vox3d.metrics_report";
pub const FORMAT_DATASET: &str = "vox3d.dataset";
pub const FORMAT_WEIGHTS: &str = "vox3d.weights";

fn envelope(format: &str) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("format".into(), json!(format));
    m.insert("version".into(), json!(DOC_VERSION));
    m
}

fn save(path: &Path, doc: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)?;
    text.push('\n');
    write_text(path, &text)
}

fn load(path: &Path) -> Result<Value> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

// Landmark specs.

pub fn landmark_spec_to_doc(spec: &LandmarkSpec, n_vertices: usize) -> Value {
    let mut doc = envelope(FORMAT_LANDMARKS);
    doc.insert("n_vertices".into(), json!(n_vertices));
    let anchors: Map<String, Value> = Anchors::NAMES
        .iter()
        .zip(spec.anchors().as_array())
        .map(|(k, v)| ((*k).into(), json!(v)))
        .collect();
    doc.insert("anchors".into(), Value::Object(anchors));
    doc.insert("landmarks".into(), json!(spec.landmarks()));
    let regions: Map<String, Value> = spec
        .regions()
        .iter()
        .map(|(r, members)| (r.name().into(), json!(members)))
        .collect();
    doc.insert("regions".into(), Value::Object(regions));
    Value::Object(doc)
}

pub fn landmark_spec_from_doc(doc: &Value) -> Result<(LandmarkSpec, usize)> {
    check_envelope(doc, FORMAT_LANDMARKS)?;
    let n: usize = typed(doc, "n_vertices")?;
    let anchors_doc = field(doc, "anchors")?;
    let mut anchors = [0usize; 10];
    for (slot, name) in anchors.iter_mut().zip(Anchors::NAMES) {
        *slot = typed(anchors_doc, name)?;
    }
    let landmarks: Vec<usize> = typed(doc, "landmarks")?;
    let raw: BTreeMap<String, Vec<usize>> = typed(doc, "regions")?;
    let mut regions = BTreeMap::new();
    for (name, members) in raw {
        regions.insert(name.parse::<Region>()?, members);
    }
    let spec = LandmarkSpec::new(Anchors::from_array(anchors), landmarks, regions, n)?;
    Ok((spec, n))
}

pub fn save_landmark_spec(path: &Path, spec: &LandmarkSpec, n_vertices: usize) -> Result<()> {
    save(path, &landmark_spec_to_doc(spec, n_vertices))
}

pub fn load_landmark_spec(path: &Path) -> Result<(LandmarkSpec, usize)> {
    landmark_spec_from_doc(&load(path)?)
}

// Dense arrays.

fn matrix_value(m: &DMatrix<f64>) -> Value {
    let data: Vec<f64> = m.transpose().as_slice().to_vec();
    json!({ "shape": [m.nrows(), m.ncols()], "data": data })
}

fn matrix_from_value(v: &Value) -> Result<DMatrix<f64>> {
    let shape: [usize; 2] = typed(v, "shape")?;
    let data: Vec<f64> = typed(v, "data")?;
    let expected = shape[0]
        .checked_mul(shape[1])
        .ok_or_else(|| Error::Invalid("array shape overflows".into()))?;
    if data.len() != expected {
        return Err(Error::dim("array data length", expected, data.len()));
    }
    Ok(DMatrix::from_row_slice(shape[0], shape[1], &data))
}

/// Row-major 2-D array.
pub fn array_to_doc(m: &DMatrix<f64>) -> Value {
    let mut doc = envelope(FORMAT_ARRAY);
    if let Value::Object(body) = matrix_value(m) {
        doc.extend(body);
    }
    Value::Object(doc)
}

pub fn array_from_doc(doc: &Value) -> Result<DMatrix<f64>> {
    check_envelope(doc, FORMAT_ARRAY)?;
    matrix_from_value(doc)
}

pub fn save_array(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    save(path, &array_to_doc(m))
}

pub fn load_array(path: &Path) -> Result<DMatrix<f64>> {
    array_from_doc(&load(path)?)
}

pub fn batch_to_doc(batch: &EmbeddingBatch) -> Value {
    array_to_doc(batch.rows())
}

pub fn batch_from_doc(doc: &Value) -> Result<EmbeddingBatch> {
    EmbeddingBatch::new(array_from_doc(doc)?)
}

pub fn save_batch(path: &Path, batch: &EmbeddingBatch) -> Result<()> {
    save(path, &batch_to_doc(batch))
}

pub fn load_batch(path: &Path) -> Result<EmbeddingBatch> {
    batch_from_doc(&load(path)?)
}

// Coefficient vectors.

pub fn params_to_doc(p: &ParamVector) -> Value {
    let mut doc = envelope(FORMAT_PARAMS);
    doc.insert("normalized".into(), json!(p.normalized));
    doc.insert("shape".into(), json!(p.shape));
    doc.insert("expr".into(), json!(p.expr));
    Value::Object(doc)
}

pub fn params_from_doc(doc: &Value) -> Result<ParamVector> {
    check_envelope(doc, FORMAT_PARAMS)?;
    Ok(ParamVector::new(
        typed(doc, "shape")?,
        typed(doc, "expr")?,
        typed(doc, "normalized")?,
    ))
}

pub fn save_params(path: &Path, p: &ParamVector) -> Result<()> {
    save(path, &params_to_doc(p))
}

pub fn load_params(path: &Path) -> Result<ParamVector> {
    params_from_doc(&load(path)?)
}

// Metric reports.

pub fn report_to_doc(r: &MetricsReport) -> Value {
    let mut are = Map::new();
    for line in Line::ALL {
        are.insert(line.key().into(), json!(r.are.get(line)));
    }
    are.insert("mean".into(), json!(r.are.mean));
    let parts: Map<String, Value> = r.part_rmse.iter().map(|(k, v)| (k.name().into(), json!(v))).collect();
    let mut doc = envelope(FORMAT_REPORT);
    doc.insert("are".into(), Value::Object(are));
    doc.insert("nme".into(), json!(r.nme));
    doc.insert("holistic_rmse".into(), json!(r.holistic_rmse));
    doc.insert("part_rmse".into(), Value::Object(parts));
    doc.insert(
        "provenance".into(),
        json!({ "pred": r.provenance.pred, "reference": r.provenance.reference }),
    );
    Value::Object(doc)
}

/// Parses and validates a report, including the `are.mean` consistency check.
pub fn report_from_doc(doc: &Value) -> Result<MetricsReport> {
    check_envelope(doc, FORMAT_REPORT)?;
    let are_doc = field(doc, "are")?;
    let are = AreBlock {
        er: typed(are_doc, "ER")?,
        fr: typed(are_doc, "FR")?,
        mr: typed(are_doc, "MR")?,
        cr: typed(are_doc, "CR")?,
        mean: typed(are_doc, "mean")?,
    };
    let parts_doc = field(doc, "part_rmse")?;
    let mut part_rmse = BTreeMap::new();
    for r in Region::ALL {
        part_rmse.insert(r, typed(parts_doc, r.name())?);
    }
    if let Some(obj) = parts_doc.as_object() {
        if let Some(extra) = obj.keys().find(|k| k.parse::<Region>().is_err()) {
            return Err(Error::Invalid(format!("unknown region '{extra}' in part_rmse")));
        }
    }
    let prov = field(doc, "provenance")?;
    let report = MetricsReport {
        are,
        nme: typed(doc, "nme")?,
        holistic_rmse: typed(doc, "holistic_rmse")?,
        part_rmse,
        provenance: Provenance {
            pred: typed(prov, "pred")?,
            reference: typed(prov, "reference")?,
        },
    };
    report.validate()?;
    Ok(report)
}

pub fn save_report(path: &Path, r: &MetricsReport) -> Result<()> {
    save(path, &report_to_doc(r))
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    report_from_doc(&load(path)?)
}

// Paired datasets.

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape_dim: usize,
    pub expr_dim: usize,
    pub embedding_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(shape_dim: usize, expr_dim: usize, embedding_dim: usize, samples: Vec<Sample>) -> Result<Self> {
        let ds = Self {
            shape_dim,
            expr_dim,
            embedding_dim,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, s) in self.samples.iter().enumerate() {
            if s.embedding.len() != self.embedding_dim {
                return Err(Error::dim(format!("sample {k} embedding"), self.embedding_dim, s.embedding.len()));
            }
            if s.params.shape.len() != self.shape_dim || s.params.expr.len() != self.expr_dim {
                return Err(Error::dim(
                    format!("sample {k} coefficients"),
                    self.shape_dim + self.expr_dim,
                    s.params.len(),
                ));
            }
            if !s.params.normalized {
                return Err(Error::NormalizationState { expected: true });
            }
            let finite = s.embedding.iter().all(|v| v.is_finite())
                && s.params.is_finite()
                && s.landmarks.iter().all(|p| p.iter().all(|c| c.is_finite()));
            if !finite {
                return Err(Error::NonFinite(format!("sample {k}")));
            }
        }
        Ok(())
    }
}

pub fn dataset_to_doc(ds: &Dataset) -> Value {
    let samples: Vec<Value> = ds
        .samples
        .iter()
        .map(|s| {
            let lm: Vec<[f64; 3]> = s.landmarks.iter().map(|p| [p.x, p.y, p.z]).collect();
            json!({ "embedding": s.embedding, "params": s.params.stacked(), "landmarks": lm })
        })
        .collect();
    let mut doc = envelope(FORMAT_DATASET);
    doc.insert("shape_dim".into(), json!(ds.shape_dim));
    doc.insert("expr_dim".into(), json!(ds.expr_dim));
    doc.insert("embedding_dim".into(), json!(ds.embedding_dim));
    doc.insert("samples".into(), Value::Array(samples));
    Value::Object(doc)
}

pub fn dataset_from_doc(doc: &Value) -> Result<Dataset> {
    check_envelope(doc, FORMAT_DATASET)?;
    let shape_dim: usize = typed(doc, "shape_dim")?;
    let expr_dim: usize = typed(doc, "expr_dim")?;
    let embedding_dim: usize = typed(doc, "embedding_dim")?;
    let raw = field(doc, "samples")?
        .as_array()
        .ok_or_else(|| Error::Invalid("'samples' must be an array".into()))?;
    let mut samples = Vec::with_capacity(raw.len());
    for s in raw {
        let params: Vec<f64> = typed(s, "params")?;
        if params.len() != shape_dim + expr_dim {
            return Err(Error::dim("sample coefficients", shape_dim + expr_dim, params.len()));
        }
        let lm: Vec<[f64; 3]> = typed(s, "landmarks")?;
        samples.push(Sample {
            embedding: typed(s, "embedding")?,
            params: ParamVector::from_stacked(&params, shape_dim, true),
            landmarks: lm.into_iter().map(Vector3::from).collect(),
        });
    }
    Dataset::new(shape_dim, expr_dim, embedding_dim, samples)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    save(path, &dataset_to_doc(ds))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_doc(&load(path)?)
}

// Decoder weights.

pub fn weights_to_doc(w: &DecoderWeights) -> Value {
    let mut doc = envelope(FORMAT_WEIGHTS);
    doc.insert("shape_w".into(), matrix_value(&w.shape_w));
    doc.insert("shape_b".into(), json!(w.shape_b.as_slice()));
    doc.insert("expr_w".into(), matrix_value(&w.expr_w));
    doc.insert("expr_b".into(), json!(w.expr_b.as_slice()));
    Value::Object(doc)
}

pub fn weights_from_doc(doc: &Value) -> Result<DecoderWeights> {
    check_envelope(doc, FORMAT_WEIGHTS)?;
    let w = DecoderWeights {
        shape_w: matrix_from_value(field(doc, "shape_w")?)?,
        shape_b: DVector::from_vec(typed(doc, "shape_b")?),
        expr_w: matrix_from_value(field(doc, "expr_w")?)?,
        expr_b: DVector::from_vec(typed(doc, "expr_b")?),
    };
    w.validate()?;
    Ok(w)
}

pub fn save_weights(path: &Path, w: &DecoderWeights) -> Result<()> {
    save(path, &weights_to_doc(w))
}

pub fn load_weights(path: &Path) -> Result<DecoderWeights> {
    weights_from_doc(&load(path)?)
}
