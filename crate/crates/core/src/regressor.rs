//! Linear decoders from a voice embedding to normalized shape and
//! expression coefficients, trained on the squared coefficient error with
//! Adam.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::synthetic::Sample;

pub const DEFAULT_EMBEDDING_DIM: usize = 64;

/// `α_s = W_s v + b_s`, `α_e = W_e v + b_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub shape_w: DMatrix<f64>,
    pub shape_b: DVector<f64>,
    pub expr_w: DMatrix<f64>,
    pub expr_b: DVector<f64>,
}

impl DecoderWeights {
    pub fn zeros(shape_dim: usize, expr_dim: usize, embedding_dim: usize) -> Self {
        Self {
            shape_w: DMatrix::zeros(shape_dim, embedding_dim),
            shape_b: DVector::zeros(shape_dim),
            expr_w: DMatrix::zeros(expr_dim, embedding_dim),
            expr_b: DVector::zeros(expr_dim),
        }
    }

    /// Gaussian weights with `σ = 1/√embedding_dim`, zero biases.
    pub fn init(shape_dim: usize, expr_dim: usize, embedding_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let sigma = 1.0 / (embedding_dim as f64).sqrt();
        let mut draw = |r, c| DMatrix::from_fn(r, c, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
        let shape_w = draw(shape_dim, embedding_dim);
        let expr_w = draw(expr_dim, embedding_dim);
        Self {
            shape_w,
            shape_b: DVector::zeros(shape_dim),
            expr_w,
            expr_b: DVector::zeros(expr_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embedding_dim();
        if self.expr_w.ncols() != d {
            return Err(Error::dim("expression head columns", d, self.expr_w.ncols()));
        }
        if self.shape_b.len() != self.shape_w.nrows() {
            return Err(Error::dim("shape bias", self.shape_w.nrows(), self.shape_b.len()));
        }
        if self.expr_b.len() != self.expr_w.nrows() {
            return Err(Error::dim("expression bias", self.expr_w.nrows(), self.expr_b.len()));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("decoder weights".into()));
        }
        Ok(())
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_w.nrows()
    }

    pub fn expr_dim(&self) -> usize {
        self.expr_w.nrows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.shape_w.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Every parameter in a fixed order: shape head, shape bias,
    /// expression head, expression bias (matrices column-major).
    fn values(&self) -> impl Iterator<Item = &f64> {
        self.shape_w
            .iter()
            .chain(self.shape_b.iter())
            .chain(self.expr_w.iter())
            .chain(self.expr_b.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.shape_w
            .iter_mut()
            .chain(self.shape_b.iter_mut())
            .chain(self.expr_w.iter_mut())
            .chain(self.expr_b.iter_mut())
    }

    fn same_shape(&self, other: &DecoderWeights) -> Result<()> {
        let dims = |w: &DecoderWeights| (w.shape_dim(), w.expr_dim(), w.embedding_dim());
        if dims(self) != dims(other) {
            return Err(Error::Invalid(format!(
                "decoder shapes differ: {:?} vs {:?}",
                dims(self),
                dims(other)
            )));
        }
        Ok(())
    }
}

pub fn forward(embedding: &[f64], w: &DecoderWeights) -> Result<ParamVector> {
    if embedding.len() != w.embedding_dim() {
        return Err(Error::dim("embedding", w.embedding_dim(), embedding.len()));
    }
    if !embedding.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("embedding".into()));
    }
    let v = DVector::from_column_slice(embedding);
    let shape = &w.shape_w * &v + &w.shape_b;
    let expr = &w.expr_w * &v + &w.expr_b;
    Ok(ParamVector::new(shape.as_slice().to_vec(), expr.as_slice().to_vec(), true))
}

/// `‖α_s − α*_s‖² + ‖α_e − α*_e‖²` and its gradient `2(pred − gt)`.
pub fn supervised_loss(pred: &ParamVector, gt: &ParamVector) -> Result<(f64, ParamVector)> {
    pred.same_dims(gt)?;
    if pred.normalized != gt.normalized {
        return Err(Error::NormalizationState {
            expected: gt.normalized,
        });
    }
    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
    let ds = diff(&pred.shape, &gt.shape);
    let de = diff(&pred.expr, &gt.expr);
    let loss = ds.iter().chain(&de).map(|d| d * d).sum();
    let scale = |v: Vec<f64>| v.into_iter().map(|d| 2.0 * d).collect();
    Ok((loss, ParamVector::new(scale(ds), scale(de), pred.normalized)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: DecoderWeights,
    pub v: DecoderWeights,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(like: &DecoderWeights, lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {lr}")));
        }
        let zeros = DecoderWeights::zeros(like.shape_dim(), like.expr_dim(), like.embedding_dim());
        Ok(Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    state: &AdamState,
    w: &DecoderWeights,
    grads: &DecoderWeights,
) -> Result<(AdamState, DecoderWeights)> {
    w.same_shape(grads)?;
    w.same_shape(&state.m)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    let mut next = state.clone();
    next.step += 1;
    let t = next.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let mut out = w.clone();
    for (((p, g), m), v) in out
        .values_mut()
        .zip(grads.values())
        .zip(next.m.values_mut())
        .zip(next.v.values_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("updated weights".into()));
    }
    Ok((next, out))
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub embedding: Vec<f64>,
    pub target: ParamVector,
}

impl From<&Sample> for Pair {
    fn from(s: &Sample) -> Self {
        Pair {
            embedding: s.embedding.clone(),
            target: s.params.clone(),
        }
    }
}

pub fn pairs_from_samples(samples: &[Sample]) -> Vec<Pair> {
    samples.iter().map(Pair::from).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            batch_size: 32,
            iters: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub weights: DecoderWeights,
    /// Mean mini-batch loss before each update.
    pub history: Vec<f64>,
}

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

fn training_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The weights `train` starts from for a given seed.
pub fn initial_weights(shape_dim: usize, expr_dim: usize, embedding_dim: usize, seed: u64) -> DecoderWeights {
    DecoderWeights::init(shape_dim, expr_dim, embedding_dim, &mut training_rng(seed, INIT_STREAM))
}

fn check_dataset(data: &[Pair]) -> Result<(usize, usize, usize)> {
    let first = data
        .first()
        .ok_or_else(|| Error::Empty("training dataset is empty".into()))?;
    let dims = (first.target.shape.len(), first.target.expr.len(), first.embedding.len());
    for (k, p) in data.iter().enumerate() {
        if p.embedding.len() != dims.2 {
            return Err(Error::dim("embedding length", dims.2, p.embedding.len()));
        }
        p.target.same_dims(&first.target)?;
        if !p.target.normalized {
            return Err(Error::NormalizationState { expected: true });
        }
        if !p.target.is_finite() || !p.embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("training example {k}")));
        }
    }
    Ok(dims)
}

/// Mean supervised loss over a dataset.
pub fn mean_loss(w: &DecoderWeights, data: &[Pair]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset is empty".into()));
    }
    let mut total = 0.0;
    for p in data {
        total += supervised_loss(&forward(&p.embedding, w)?, &p.target)?.0;
    }
    Ok(total / data.len() as f64)
}

/// Mean loss over `batch` and its gradient with respect to the weights.
pub fn batch_gradient(w: &DecoderWeights, batch: &[&Pair]) -> Result<(f64, DecoderWeights)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let d = w.embedding_dim();
    let n = batch.len();
    for p in batch {
        if p.embedding.len() != d {
            return Err(Error::dim("embedding", d, p.embedding.len()));
        }
        p.target.same_dims(&ParamVector::zeros(w.shape_dim(), w.expr_dim()))?;
    }
    let v = DMatrix::from_fn(d, n, |r, c| batch[c].embedding[r]);
    // Residual columns, scaled to the gradient of the batch mean.
    let head = |weights: &DMatrix<f64>, bias: &DVector<f64>, target: &dyn Fn(&Pair) -> &[f64]| {
        let mut res = weights * &v;
        for (c, mut col) in res.column_iter_mut().enumerate() {
            col += bias;
            col -= DVector::from_column_slice(target(batch[c]));
        }
        res
    };
    let rs = head(&w.shape_w, &w.shape_b, &|p| &p.target.shape);
    let re = head(&w.expr_w, &w.expr_b, &|p| &p.target.expr);
    let inv = 1.0 / n as f64;
    let loss = (rs.norm_squared() + re.norm_squared()) * inv;
    let scale = 2.0 * inv;
    let grad = DecoderWeights {
        shape_w: &rs * v.transpose() * scale,
        shape_b: rs.column_sum() * scale,
        expr_w: &re * v.transpose() * scale,
        expr_b: re.column_sum() * scale,
    };
    Ok((loss, grad))
}

/// Mini-batch Adam. Each epoch visits a fresh seeded permutation of the
/// data; a final partial batch is used as is.
pub fn train(data: &[Pair], cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let (ps, pe, d) = check_dataset(data)?;
    let mut weights = initial_weights(ps, pe, d, cfg.seed);
    let mut state = AdamState::new(&weights, cfg.lr)?;
    let mut shuffle = training_rng(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        if cursor >= order.len() {
            order.shuffle(&mut shuffle);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch: Vec<&Pair> = order[cursor..end].iter().map(|&i| &data[i]).collect();
        cursor = end;
        let (loss, grad) = batch_gradient(&weights, &batch)?;
        history.push(loss);
        (state, weights) = adam_step(&state, &weights, &grad)?;
    }
    Ok(TrainResult { weights, history })
}
