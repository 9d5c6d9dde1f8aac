//! Probabilistic knowledge transfer between teacher and student embeddings.
//!
//! Each batch is turned into a column-stochastic neighbor matrix using the
//! kernel `K(u, v) = ½(cos(u, v) + 1)`. Column `i` of the matrix is the
//! distribution over neighbors of sample `i`:
//!
//! ```text
//! P[j, i] = K(z_j, z_i) / Σ_{k≠i} K(z_k, z_i),   P[i, i] = 0
//! ```
//!
//! A column whose kernel mass is at most ε (every other sample antipodal
//! to `i`) is uniform over the `B − 1` neighbors.
//!
//! The divergence sums the per-column KL terms of teacher against student.
//! Gradients are analytic and taken with respect to the student only.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::ParamVector;

/// Guard inside logarithms and denominators.
pub const EPS: f64 = 1e-12;

/// `B × ν` feature rows; `B ≥ 2`, rows nonzero and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    rows: DMatrix<f64>,
}

impl EmbeddingBatch {
    pub fn new(rows: DMatrix<f64>) -> Result<Self> {
        if rows.nrows() < 2 {
            return Err(Error::Invalid(format!(
                "an embedding batch needs at least 2 rows, got {}",
                rows.nrows()
            )));
        }
        if rows.ncols() == 0 {
            return Err(Error::Invalid("embedding rows have zero length".into()));
        }
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding batch".into()));
        }
        if let Some(i) = (0..rows.nrows()).find(|&i| rows.row(i).norm() == 0.0) {
            return Err(Error::Invalid(format!("embedding row {i} has zero norm")));
        }
        Ok(Self { rows })
    }

    /// Row-major `B × ν` values.
    pub fn from_row_slice(batch: usize, width: usize, values: &[f64]) -> Result<Self> {
        if values.len() != batch * width {
            return Err(Error::dim("embedding values", batch * width, values.len()));
        }
        Self::new(DMatrix::from_row_slice(batch, width, values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != width) {
            return Err(Error::dim("embedding row length", width, bad.len()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_row_slice(rows.len(), width, &flat)
    }

    pub fn batch_size(&self) -> usize {
        self.rows.nrows()
    }

    pub fn width(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn into_rows(self) -> DMatrix<f64> {
        self.rows
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.rows.transpose().as_slice().to_vec()
    }

    /// Rows scaled to unit length.
    fn unit_rows(&self) -> (DMatrix<f64>, DVector<f64>) {
        let norms = DVector::from_fn(self.rows.nrows(), |i, _| self.rows.row(i).norm());
        let mut unit = self.rows.clone();
        for (i, mut row) in unit.row_iter_mut().enumerate() {
            row /= norms[i];
        }
        (unit, norms)
    }
}

/// Column-stochastic `B × B` neighbor matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CondProbMatrix {
    values: DMatrix<f64>,
}

impl CondProbMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    /// Probability of picking `j` as a neighbor of `i`.
    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.values[(j, i)]
    }
}

pub fn cosine_kernel(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim("kernel operand", u.len(), v.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Invalid("cosine kernel of a zero-norm vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((0.5 * (dot / (nu * nv) + 1.0)).clamp(0.0, 1.0))
}

fn kernel_matrix(unit: &DMatrix<f64>) -> DMatrix<f64> {
    let mut k = unit * unit.transpose();
    k.apply(|c| *c = (0.5 * (*c + 1.0)).clamp(0.0, 1.0));
    k
}

/// Off-diagonal column sums of a kernel matrix.
fn column_mass(k: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(k.ncols(), |i, _| {
        k.column(i).iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum()
    })
}

fn normalize_columns(k: &DMatrix<f64>, mass: &DVector<f64>) -> DMatrix<f64> {
    let uniform = 1.0 / (k.nrows() - 1) as f64;
    DMatrix::from_fn(k.nrows(), k.ncols(), |j, i| {
        if i == j {
            0.0
        } else if mass[i] > EPS {
            k[(j, i)] / mass[i]
        } else {
            uniform
        }
    })
}

pub fn conditional_probabilities(batch: &EmbeddingBatch) -> CondProbMatrix {
    let (unit, _) = batch.unit_rows();
    let k = kernel_matrix(&unit);
    CondProbMatrix {
        values: normalize_columns(&k, &column_mass(&k)),
    }
}

fn check_pair(teacher: &EmbeddingBatch, student: &EmbeddingBatch) -> Result<()> {
    if teacher.batch_size() != student.batch_size() {
        return Err(Error::dim("student batch size", teacher.batch_size(), student.batch_size()));
    }
    Ok(())
}

fn kl_columns(p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let b = p.nrows();
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            if j != i {
                let pj = p[(j, i)];
                total += pj * ((pj + EPS) / (q[(j, i)] + EPS)).ln();
            }
        }
    }
    total
}

/// `Σ_i KL(P[·, i] ‖ Q[·, i])`, teacher `P` against student `Q`.
pub fn divergence_loss(teacher: &EmbeddingBatch, student: &EmbeddingBatch) -> Result<f64> {
    check_pair(teacher, student)?;
    let p = conditional_probabilities(teacher);
    let q = conditional_probabilities(student);
    Ok(kl_columns(&p.values, &q.values))
}

/// Gradient of [`divergence_loss`] with respect to every student entry.
pub fn divergence_grad(teacher: &EmbeddingBatch, student: &EmbeddingBatch) -> Result<DMatrix<f64>> {
    check_pair(teacher, student)?;
    let p = conditional_probabilities(teacher).values;
    let (unit, norms) = student.unit_rows();
    let k = kernel_matrix(&unit);
    let mass = column_mass(&k);
    let q = normalize_columns(&k, &mass);
    let b = student.batch_size();

    // dL/dK[a, i] through the column normalization.
    let mut h = DMatrix::zeros(b, b);
    for i in 0..b {
        if mass[i] <= EPS {
            continue;
        }
        let denom = mass[i];
        let mut coupled = 0.0;
        for j in 0..b {
            if j != i {
                let g = -p[(j, i)] / (q[(j, i)] + EPS);
                h[(j, i)] = g / denom;
                coupled += g * k[(j, i)];
            }
        }
        let shift = coupled / (denom * denom);
        for j in 0..b {
            if j != i {
                h[(j, i)] -= shift;
            }
        }
    }

    // K[a, b] = ½(u_a·u_b + 1) enters column b as row a and column a as row b.
    let sym = (&h + h.transpose()) * 0.5;
    let du = &sym * &unit;

    // Through u = z / ‖z‖.
    let mut grad = DMatrix::zeros(b, student.width());
    for a in 0..b {
        let u = unit.row(a);
        let g = du.row(a);
        let radial = g.dot(&u);
        grad.set_row(a, &((g - u * radial) / norms[a]));
    }
    Ok(grad)
}

/// `‖α^T − α‖²` over both blocks, with gradient `2(α − α^T)` for the student.
pub fn pseudo_gt_loss(teacher: &ParamVector, student: &ParamVector) -> Result<(f64, ParamVector)> {
    teacher.same_dims(student)?;
    let diff = |s: &[f64], t: &[f64]| -> Vec<f64> { s.iter().zip(t).map(|(a, b)| a - b).collect() };
    let ds = diff(&student.shape, &teacher.shape);
    let de = diff(&student.expr, &teacher.expr);
    let loss = ds.iter().chain(&de).map(|d| d * d).sum();
    let grad = ParamVector::new(
        ds.iter().map(|d| 2.0 * d).collect(),
        de.iter().map(|d| 2.0 * d).collect(),
        student.normalized,
    );
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdConfig {
    /// Multiplier on the divergence term; 1.0 gives the plain sum.
    pub divergence_weight: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { divergence_weight: 1.0 }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.divergence_weight.is_finite() || self.divergence_weight < 0.0 {
            return Err(Error::Invalid(format!(
                "divergence_weight must be finite and >= 0, got {}",
                self.divergence_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdLoss {
    pub pseudo_gt: f64,
    pub divergence: f64,
    /// `pseudo_gt + divergence_weight · divergence`.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdGradient {
    pub embedding: DMatrix<f64>,
    pub params: ParamVector,
}

pub fn kd_loss(
    teacher_emb: &EmbeddingBatch,
    student_emb: &EmbeddingBatch,
    teacher_params: &ParamVector,
    student_params: &ParamVector,
    cfg: &KdConfig,
) -> Result<KdLoss> {
    cfg.validate()?;
    let (pseudo_gt, _) = pseudo_gt_loss(teacher_params, student_params)?;
    let divergence = divergence_loss(teacher_emb, student_emb)?;
    Ok(KdLoss {
        pseudo_gt,
        divergence,
        total: pseudo_gt + cfg.divergence_weight * divergence,
    })
}

pub fn kd_grad(
    teacher_emb: &EmbeddingBatch,
    student_emb: &EmbeddingBatch,
    teacher_params: &ParamVector,
    student_params: &ParamVector,
    cfg: &KdConfig,
) -> Result<KdGradient> {
    cfg.validate()?;
    let (_, params) = pseudo_gt_loss(teacher_params, student_params)?;
    let embedding = divergence_grad(teacher_emb, student_emb)? * cfg.divergence_weight;
    Ok(KdGradient { embedding, params })
}
