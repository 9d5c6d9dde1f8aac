use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MorphableModel, ParamStats, Triangle};

pub const MODEL_MAGIC: &[u8; 4] = b"V3DM";
pub const MODEL_VERSION: u8 = 1;

/// JSON header of a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub n_vertices: usize,
    pub shape_dim: usize,
    pub expr_dim: usize,
    pub n_triangles: usize,
    #[serde(default)]
    pub shape_mean: Option<Vec<f64>>,
    #[serde(default)]
    pub shape_std: Option<Vec<f64>>,
    #[serde(default)]
    pub expr_mean: Option<Vec<f64>>,
    #[serde(default)]
    pub expr_std: Option<Vec<f64>>,
    /// Generator seed, when the model is synthetic.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ModelHeader {
    fn stats(&self) -> Result<Option<ParamStats>> {
        match (&self.shape_mean, &self.shape_std, &self.expr_mean, &self.expr_std) {
            (None, None, None, None) => Ok(None),
            (Some(sm), Some(ss), Some(em), Some(es)) => Ok(Some(ParamStats {
                shape_mean: sm.clone(),
                shape_std: ss.clone(),
                expr_mean: em.clone(),
                expr_std: es.clone(),
            })),
            _ => Err(Error::Invalid(
                "model header must carry all four statistics arrays or none".into(),
            )),
        }
    }

    fn payload_len(&self) -> Option<usize> {
        let rows = self.n_vertices.checked_mul(3)?;
        let floats = rows.checked_mul(1 + self.shape_dim + self.expr_dim)?;
        floats.checked_mul(8)?.checked_add(self.n_triangles.checked_mul(12)?)
    }
}

pub fn encode_model(model: &MorphableModel, seed: Option<u64>) -> Result<Vec<u8>> {
    let stats = model.param_stats();
    let header = ModelHeader {
        n_vertices: model.n_vertices(),
        shape_dim: model.shape_dim(),
        expr_dim: model.expr_dim(),
        n_triangles: model.triangles().len(),
        shape_mean: stats.map(|s| s.shape_mean.clone()),
        shape_std: stats.map(|s| s.shape_std.clone()),
        expr_mean: stats.map(|s| s.expr_mean.clone()),
        expr_std: stats.map(|s| s.expr_std.clone()),
        seed,
    };
    let text = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(text.len()).map_err(|_| Error::Invalid("model header too large".into()))?;
    let mut out = Vec::with_capacity(9 + text.len() + header.payload_len().unwrap_or(0));
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&text);
    for v in model.mean_face().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for basis in [model.shape_basis(), model.expr_basis()] {
        for r in 0..basis.nrows() {
            for c in 0..basis.ncols() {
                out.extend_from_slice(&basis[(r, c)].to_le_bytes());
            }
        }
    }
    for tri in model.triangles().iter() {
        for i in tri {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!(
                "{what} needs {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len().saturating_sub(self.pos)
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} entry {k}")));
        }
        Ok(values)
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<(MorphableModel, ModelHeader)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::Invalid("not a model file (bad magic)".into()));
    }
    let version = cur.take(1, "version byte")?[0];
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            format: "model".into(),
            found: version.into(),
        });
    }
    let header_len = u32::from_le_bytes(cur.take(4, "header length")?.try_into().unwrap()) as usize;
    let header: ModelHeader = serde_json::from_slice(cur.take(header_len, "header")?)?;
    let expected = header
        .payload_len()
        .ok_or_else(|| Error::Invalid("model header dimensions overflow".into()))?;
    let available = bytes.len() - cur.pos;
    if available < expected {
        return Err(Error::Truncated(format!(
            "header announces {expected} payload bytes, file holds {available}"
        )));
    }
    if available > expected {
        return Err(Error::Invalid(format!(
            "{} bytes of trailing data after the model payload",
            available - expected
        )));
    }

    let rows = 3 * header.n_vertices;
    let mean = DVector::from_vec(cur.f64s(rows, "mean face")?);
    let shape = DMatrix::from_row_slice(rows, header.shape_dim, &cur.f64s(rows * header.shape_dim, "shape basis")?);
    let expr = DMatrix::from_row_slice(rows, header.expr_dim, &cur.f64s(rows * header.expr_dim, "expression basis")?);
    let raw = cur.take(header.n_triangles * 12, "triangles")?;
    let triangles: Vec<Triangle> = raw
        .chunks_exact(12)
        .map(|c| {
            let at = |k: usize| u32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap());
            [at(0), at(1), at(2)]
        })
        .collect();
    let model = MorphableModel::new(mean, shape, expr, triangles, header.stats()?)?;
    Ok((model, header))
}

pub fn save_model(path: &Path, model: &MorphableModel, seed: Option<u64>) -> Result<()> {
    std::fs::write(path, encode_model(model, seed)?).map_err(Error::at(path))
}

pub fn load_model(path: &Path) -> Result<MorphableModel> {
    Ok(load_model_with_header(path)?.0)
}

pub fn load_model_with_header(path: &Path) -> Result<(MorphableModel, ModelHeader)> {
    decode_model(&std::fs::read(path).map_err(Error::at(path))?)
}
