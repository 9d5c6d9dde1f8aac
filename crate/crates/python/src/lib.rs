//! Python bindings. Vectors cross the boundary as lists of floats, meshes
//! as lists of `[x, y, z]` rows.

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::{DMatrix, Matrix3, Vector3};
use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vox3d_core::{audio, distill, faceio, fitting, metrics, model, regressor, registration, synthetic};
use vox3d_core::{Error, ErrorKind};

create_exception!(vox3d, ValidationError, PyValueError, "Invalid input or malformed file.");
create_exception!(vox3d, NumericalError, PyArithmeticError, "Singular, rank-deficient or non-finite computation.");

fn to_py(e: Error) -> PyErr {
    match e.kind() {
        ErrorKind::Validation => ValidationError::new_err(e.to_string()),
        ErrorKind::Numerical => NumericalError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for vox3d_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn points(rows: &[[f64; 3]]) -> Vec<Vector3<f64>> {
    rows.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect()
}

fn rows(points: &[Vector3<f64>]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p.x, p.y, p.z]).collect()
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(ValidationError::new_err(format!("{what}: rows have different lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn batch(rows: &[Vec<f64>], what: &str) -> PyResult<distill::EmbeddingBatch> {
    distill::EmbeddingBatch::new(matrix(rows, what)?).py()
}

fn pose(rotation_vector: [f64; 3], translation: [f64; 3]) -> model::RigidTransform {
    let rv = Vector3::from(rotation_vector);
    let t = Vector3::from(translation);
    let angle = rv.norm();
    if angle == 0.0 {
        model::RigidTransform::new(Matrix3::identity(), t).expect("identity is a rotation")
    } else {
        model::RigidTransform::from_axis_angle(&(rv / angle), angle, t)
    }
}

/// Triangle mesh.
#[pyclass(name = "FaceMesh", module = "vox3d", from_py_object)]
#[derive(Clone)]
struct PyFaceMesh {
    inner: model::FaceMesh,
}

#[pymethods]
impl PyFaceMesh {
    #[new]
    #[pyo3(signature = (vertices, triangles=Vec::new()))]
    fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[u32; 3]>) -> PyResult<Self> {
        Ok(Self {
            inner: model::FaceMesh::new(points(&vertices), triangles).py()?,
        })
    }

    #[staticmethod]
    fn load_obj(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: faceio::import_obj(&path).py()?,
        })
    }

    fn save_obj(&self, path: PathBuf) -> PyResult<()> {
        faceio::export_obj(&self.inner, &path).py()
    }

    #[getter]
    fn vertices(&self) -> Vec<[f64; 3]> {
        rows(&self.inner.vertices)
    }

    #[getter]
    fn triangles(&self) -> Vec<[u32; 3]> {
        self.inner.triangles.to_vec()
    }

    #[getter]
    fn n_vertices(&self) -> usize {
        self.inner.n_vertices()
    }

    fn normals(&self) -> PyResult<Vec<[f64; 3]>> {
        Ok(rows(&self.inner.vertex_normals().py()?))
    }

    fn scaled(&self, factor: f64) -> Self {
        Self {
            inner: self.inner.scaled(factor),
        }
    }

    fn translated(&self, offset: [f64; 3]) -> Self {
        Self {
            inner: self.inner.translated(&Vector3::from(offset)),
        }
    }

    /// Rotation given as a rotation vector in radians.
    #[pyo3(signature = (rotation_vector, translation=[0.0; 3]))]
    fn posed(&self, rotation_vector: [f64; 3], translation: [f64; 3]) -> Self {
        Self {
            inner: self.inner.apply_pose(&pose(rotation_vector, translation)),
        }
    }

    fn diagonal(&self) -> f64 {
        self.inner.diagonal()
    }

    fn __len__(&self) -> usize {
        self.inner.n_vertices()
    }

    fn __repr__(&self) -> String {
        format!(
            "FaceMesh(n_vertices={}, n_triangles={})",
            self.inner.n_vertices(),
            self.inner.triangles.len()
        )
    }
}

/// Landmark indices, the ten ratio anchors and six face regions.
#[pyclass(name = "LandmarkSpec", module = "vox3d", from_py_object)]
#[derive(Clone)]
struct PyLandmarkSpec {
    inner: fitting::LandmarkSpec,
    n_vertices: usize,
}

#[pymethods]
impl PyLandmarkSpec {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, n_vertices) = faceio::load_landmark_spec(&path).py()?;
        Ok(Self { inner, n_vertices })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        faceio::save_landmark_spec(&path, &self.inner, self.n_vertices).py()
    }

    #[getter]
    fn landmarks(&self) -> Vec<usize> {
        self.inner.landmarks().to_vec()
    }

    #[getter]
    fn anchors(&self) -> BTreeMap<&'static str, usize> {
        fitting::Anchors::NAMES
            .into_iter()
            .zip(self.inner.anchors().as_array())
            .collect()
    }

    #[getter]
    fn regions(&self) -> BTreeMap<&'static str, Vec<usize>> {
        self.inner.regions().iter().map(|(r, v)| (r.name(), v.clone())).collect()
    }

    fn landmark_points(&self, mesh: &PyFaceMesh) -> PyResult<Vec<[f64; 3]>> {
        self.inner.validate(mesh.inner.n_vertices()).py()?;
        Ok(rows(&self.inner.landmark_points(&mesh.inner.vertices)))
    }
}

/// Linear morphable face model.
#[pyclass(name = "MorphableModel", module = "vox3d")]
struct PyMorphableModel {
    inner: model::MorphableModel,
}

#[pymethods]
impl PyMorphableModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: faceio::load_model(&path).py()?,
        })
    }

    /// Seeded synthetic model.
    #[staticmethod]
    #[pyo3(signature = (seed=0, n_vertices=500, shape_dim=40, expr_dim=10))]
    fn generate(seed: u64, n_vertices: usize, shape_dim: usize, expr_dim: usize) -> PyResult<Self> {
        let cfg = synthetic::SyntheticConfig {
            seed,
            n_vertices,
            shape_dim,
            expr_dim,
            ..synthetic::SyntheticConfig::default()
        };
        Ok(Self {
            inner: synthetic::gen_model(&cfg).py()?,
        })
    }

    #[pyo3(signature = (path, seed=None))]
    fn save(&self, path: PathBuf, seed: Option<u64>) -> PyResult<()> {
        faceio::save_model(&path, &self.inner, seed).py()
    }

    #[getter]
    fn n_vertices(&self) -> usize {
        self.inner.n_vertices()
    }

    #[getter]
    fn shape_dim(&self) -> usize {
        self.inner.shape_dim()
    }

    #[getter]
    fn expr_dim(&self) -> usize {
        self.inner.expr_dim()
    }

    fn mean_mesh(&self) -> PyFaceMesh {
        PyFaceMesh {
            inner: self.inner.mean_mesh(),
        }
    }

    /// Normalized coefficients are mapped through the model statistics first.
    #[pyo3(signature = (shape, expr, normalized=false))]
    fn synthesize(&self, shape: Vec<f64>, expr: Vec<f64>, normalized: bool) -> PyResult<PyFaceMesh> {
        let mut p = model::ParamVector::new(shape, expr, normalized);
        if normalized {
            p = self.inner.denormalize_params(&p).py()?;
        }
        Ok(PyFaceMesh {
            inner: self.inner.synthesize(&p).py()?,
        })
    }

    /// Landmark spec derived from this model's mean face.
    fn landmark_spec(&self) -> PyResult<PyLandmarkSpec> {
        Ok(PyLandmarkSpec {
            inner: synthetic::gen_landmark_spec(&self.inner).py()?,
            n_vertices: self.inner.n_vertices(),
        })
    }

    /// Returns `(shape, expr, residual)`.
    #[pyo3(signature = (spec, landmarks, shape_reg=0.0, expr_reg=None))]
    fn fit(
        &self,
        spec: &PyLandmarkSpec,
        landmarks: Vec<[f64; 3]>,
        shape_reg: f64,
        expr_reg: Option<f64>,
    ) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
        let cfg = fitting::FitConfig::new(shape_reg, expr_reg.unwrap_or(shape_reg)).py()?;
        let out = fitting::fit(&self.inner, &spec.inner, &points(&landmarks), &cfg).py()?;
        Ok((out.params.shape, out.params.expr, out.residual))
    }

    fn __repr__(&self) -> String {
        format!(
            "MorphableModel(n_vertices={}, shape_dim={}, expr_dim={})",
            self.inner.n_vertices(),
            self.inner.shape_dim(),
            self.inner.expr_dim()
        )
    }
}

/// Linear embedding-to-coefficient decoder.
#[pyclass(name = "Decoder", module = "vox3d")]
struct PyDecoder {
    inner: regressor::DecoderWeights,
    history: Vec<f64>,
}

#[pymethods]
impl PyDecoder {
    /// Trains on a dataset file written by `vox3d gen --kind dataset`.
    #[staticmethod]
    #[pyo3(signature = (dataset, lr=1e-2, batch_size=32, iters=2000, seed=0))]
    fn train(dataset: PathBuf, lr: f64, batch_size: usize, iters: usize, seed: u64) -> PyResult<Self> {
        let ds = faceio::load_dataset(&dataset).py()?;
        let cfg = regressor::TrainConfig {
            lr,
            batch_size,
            iters,
            seed,
        };
        let out = regressor::train(&regressor::pairs_from_samples(&ds.samples), &cfg).py()?;
        Ok(Self {
            inner: out.weights,
            history: out.history,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: faceio::load_weights(&path).py()?,
            history: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        faceio::save_weights(&path, &self.inner).py()
    }

    /// Mini-batch loss before each update of the last training run.
    #[getter]
    fn history(&self) -> Vec<f64> {
        self.history.clone()
    }

    /// Normalized `(shape, expr)` coefficients.
    fn predict(&self, embedding: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let p = regressor::forward(&embedding, &self.inner).py()?;
        Ok((p.shape, p.expr))
    }
}

/// Full metric report as a dict with the same keys as the report file.
#[pyfunction]
#[pyo3(signature = (pred, reference, spec, pred_name=String::new(), reference_name=String::new()))]
fn evaluate(
    py: Python<'_>,
    pred: &PyFaceMesh,
    reference: &PyFaceMesh,
    spec: &PyLandmarkSpec,
    pred_name: String,
    reference_name: String,
) -> PyResult<Py<PyAny>> {
    let report = metrics::evaluate(
        &pred.inner,
        &reference.inner,
        &spec.inner,
        &registration::IcpConfig::default(),
        metrics::Provenance {
            pred: pred_name,
            reference: reference_name,
        },
    )
    .py()?;
    let text = serde_json::to_string(&faceio::report_to_doc(&report)).expect("report serializes");
    let json = py.import("json")?;
    Ok(json.call_method1("loads", (text,))?.unbind())
}

/// Rigid point-to-plane ICP of `source` onto `target`.
#[pyfunction]
#[pyo3(signature = (source, target, max_iters=50))]
fn icp<'py>(py: Python<'py>, source: &PyFaceMesh, target: &PyFaceMesh, max_iters: usize) -> PyResult<Bound<'py, PyDict>> {
    let cfg = registration::IcpConfig {
        max_iters,
        ..registration::IcpConfig::default()
    };
    let out = registration::icp(&source.inner, &target.inner, &cfg).py()?;
    let r = out.transform.rotation();
    let rotation: Vec<[f64; 3]> = (0..3).map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]).collect();
    let t = out.transform.translation();
    let d = PyDict::new(py);
    d.set_item("rotation", rotation)?;
    d.set_item("translation", [t.x, t.y, t.z])?;
    d.set_item("rmse", out.rmse)?;
    d.set_item("iterations", out.iterations)?;
    d.set_item("converged", out.converged)?;
    Ok(d)
}

/// Column-stochastic conditional probabilities `P[j][i]` of a batch.
#[pyfunction]
fn conditional_probabilities(embeddings: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(matrix_rows(&distill::conditional_probabilities(&batch(&embeddings, "embeddings")?).values()))
}

#[pyfunction]
fn divergence_loss(teacher: Vec<Vec<f64>>, student: Vec<Vec<f64>>) -> PyResult<f64> {
    distill::divergence_loss(&batch(&teacher, "teacher")?, &batch(&student, "student")?).py()
}

/// Gradient of `divergence_loss` with respect to the student rows.
#[pyfunction]
fn divergence_grad(teacher: Vec<Vec<f64>>, student: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let g = distill::divergence_grad(&batch(&teacher, "teacher")?, &batch(&student, "student")?).py()?;
    Ok(matrix_rows(&g))
}

/// Returns `(pseudo_gt, divergence, total)`; parameters are stacked vectors.
#[pyfunction]
#[pyo3(signature = (teacher, student, teacher_params, student_params, divergence_weight=1.0))]
fn kd_loss(
    teacher: Vec<Vec<f64>>,
    student: Vec<Vec<f64>>,
    teacher_params: Vec<f64>,
    student_params: Vec<f64>,
    divergence_weight: f64,
) -> PyResult<(f64, f64, f64)> {
    let tp = model::ParamVector::from_stacked(&teacher_params, teacher_params.len(), true);
    let sp = model::ParamVector::from_stacked(&student_params, student_params.len(), true);
    let out = distill::kd_loss(
        &batch(&teacher, "teacher")?,
        &batch(&student, "student")?,
        &tp,
        &sp,
        &distill::KdConfig { divergence_weight },
    )
    .py()?;
    Ok((out.pseudo_gt, out.divergence, out.total))
}

/// `T × 64` log-mel frames, per-bin normalized unless `normalize` is false.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate=16000, normalize=true))]
fn log_mel(samples: Vec<f64>, sample_rate: u32, normalize: bool) -> PyResult<Vec<Vec<f64>>> {
    let wave = audio::Waveform::new(samples, sample_rate).py()?;
    let mut spec = audio::log_mel(&wave, &audio::MelConfig::default()).py()?;
    if normalize {
        spec = audio::per_bin_normalize(&spec).py()?;
    }
    Ok(matrix_rows(&spec.frames))
}

/// Returns `(samples, sample_rate)` of a mono WAV file.
#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<(Vec<f64>, u32)> {
    let wave = audio::read_wav(&path).py()?;
    Ok((wave.samples().to_vec(), wave.sample_rate()))
}

#[pymodule]
fn vox3d(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ValidationError", m.py().get_type::<ValidationError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<PyFaceMesh>()?;
    m.add_class::<PyLandmarkSpec>()?;
    m.add_class::<PyMorphableModel>()?;
    m.add_class::<PyDecoder>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(icp, m)?)?;
    m.add_function(wrap_pyfunction!(conditional_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(divergence_loss, m)?)?;
    m.add_function(wrap_pyfunction!(divergence_grad, m)?)?;
    m.add_function(wrap_pyfunction!(kd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(log_mel, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    Ok(())
}
