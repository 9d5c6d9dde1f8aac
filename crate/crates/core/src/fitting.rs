//! Recovering morphable-model coefficients from 3D facial landmarks.
//!
//! The fit solves the ridge-regularized linear least-squares problem
//!
//! ```text
//! min ‖L(α) − targets‖² + λ_s ‖α_s‖² + λ_e ‖α_e‖²
//! ```
//!
//! where `L(α)` picks the 68 landmark vertices out of the synthesized mesh.
//! The problem is linear in the stacked coefficient vector, so it is
//! solved in one shot through an SVD of the augmented design matrix
//! `[J; diag(√λ)]`, which never forms the squared normal matrix.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::model::{MorphableModel, ParamVector};

pub const LANDMARK_COUNT: usize = 68;

/// Relative singular-value cutoff below which the fitting system is
/// treated as rank-deficient.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Named anchor vertices for the facial distance lines.
///
/// `A–B` ear to ear, `C–D` forehead, `E–F` outer eye corners (the
/// normalizer), `G–H` midline, `I–J` cheek to cheek.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchors {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
    pub e: usize,
    pub f: usize,
    pub g: usize,
    pub h: usize,
    pub i: usize,
    pub j: usize,
}

impl Anchors {
    pub const NAMES: [&'static str; 10] = ["A", "B", "C", "D", "E", "F", "G", "H", "I", "J"];

    pub fn as_array(&self) -> [usize; 10] {
        [
            self.a, self.b, self.c, self.d, self.e, self.f, self.g, self.h, self.i, self.j,
        ]
    }

    pub fn from_array(v: [usize; 10]) -> Self {
        let [a, b, c, d, e, f, g, h, i, j] = v;
        Self {
            a,
            b,
            c,
            d,
            e,
            f,
            g,
            h,
            i,
            j,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Region {
    LeftEye,
    RightEye,
    Nose,
    Mouth,
    LeftCheek,
    RightCheek,
}

impl Region {
    pub const ALL: [Region; 6] = [
        Region::LeftEye,
        Region::RightEye,
        Region::Nose,
        Region::Mouth,
        Region::LeftCheek,
        Region::RightCheek,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::LeftEye => "left_eye",
            Region::RightEye => "right_eye",
            Region::Nose => "nose",
            Region::Mouth => "mouth",
            Region::LeftCheek => "left_cheek",
            Region::RightCheek => "right_cheek",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Region::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown region '{s}'")))
    }
}

/// Semantic vertex annotations on a model topology.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSpec {
    anchors: Anchors,
    landmarks: Vec<usize>,
    regions: BTreeMap<Region, Vec<usize>>,
}

impl LandmarkSpec {
    /// Validates index ranges against `n_vertices`, the landmark count, and
    /// that all six regions are present and pairwise disjoint.
    pub fn new(
        anchors: Anchors,
        landmarks: Vec<usize>,
        regions: BTreeMap<Region, Vec<usize>>,
        n_vertices: usize,
    ) -> Result<Self> {
        let spec = Self {
            anchors,
            landmarks,
            regions,
        };
        spec.validate(n_vertices)?;
        Ok(spec)
    }

    pub fn validate(&self, n_vertices: usize) -> Result<()> {
        let out_of_range = |what: &str, i: usize| {
            Error::Invalid(format!(
                "{what} index {i} out of range for {n_vertices} vertices"
            ))
        };
        for (name, &i) in Anchors::NAMES.iter().zip(&self.anchors.as_array()) {
            if i >= n_vertices {
                return Err(out_of_range(&format!("anchor {name}"), i));
            }
        }
        if self.landmarks.len() != LANDMARK_COUNT {
            return Err(Error::dim("landmark list", LANDMARK_COUNT, self.landmarks.len()));
        }
        if let Some(&i) = self.landmarks.iter().find(|&&i| i >= n_vertices) {
            return Err(out_of_range("landmark", i));
        }
        let mut owner = vec![None::<Region>; n_vertices];
        for region in Region::ALL {
            let members = self
                .regions
                .get(&region)
                .ok_or_else(|| Error::MissingKey(region.name().into()))?;
            for &i in members {
                if i >= n_vertices {
                    return Err(out_of_range(region.name(), i));
                }
                if let Some(prev) = owner[i] {
                    return Err(Error::Invalid(format!(
                        "vertex {i} appears in both '{prev}' and '{region}'"
                    )));
                }
                owner[i] = Some(region);
            }
        }
        Ok(())
    }

    pub fn anchors(&self) -> &Anchors {
        &self.anchors
    }

    pub fn landmarks(&self) -> &[usize] {
        &self.landmarks
    }

    pub fn region(&self, region: Region) -> &[usize] {
        &self.regions[&region]
    }

    pub fn regions(&self) -> &BTreeMap<Region, Vec<usize>> {
        &self.regions
    }

    /// Landmark rows of a vertex list.
    pub fn landmark_points(&self, vertices: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.landmarks.iter().map(|&i| vertices[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub shape_reg: f64,
    pub expr_reg: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            shape_reg: 1e-4,
            expr_reg: 1e-4,
        }
    }
}

impl FitConfig {
    pub fn new(shape_reg: f64, expr_reg: f64) -> Result<Self> {
        let cfg = Self {
            shape_reg,
            expr_reg,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("shape_reg", self.shape_reg), ("expr_reg", self.expr_reg)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ParamVector,
    /// Unregularized squared landmark error at `params`.
    pub residual: f64,
}

/// Landmark-restricted design matrix `[V_s V_e]` (3·68 rows) and the
/// matching rows of the mean face.
fn landmark_system(model: &MorphableModel, spec: &LandmarkSpec) -> (DMatrix<f64>, DVector<f64>) {
    let (ps, pe) = (model.shape_dim(), model.expr_dim());
    let rows = 3 * spec.landmarks().len();
    let mut design = DMatrix::zeros(rows, ps + pe);
    let mut mean = DVector::zeros(rows);
    for (k, &v) in spec.landmarks().iter().enumerate() {
        for axis in 0..3 {
            let src = 3 * v + axis;
            let dst = 3 * k + axis;
            mean[dst] = model.mean_face()[src];
            design
                .view_mut((dst, 0), (1, ps))
                .copy_from(&model.shape_basis().row(src));
            design
                .view_mut((dst, ps), (1, pe))
                .copy_from(&model.expr_basis().row(src));
        }
    }
    (design, mean)
}

fn check_targets(model: &MorphableModel, spec: &LandmarkSpec, targets: &[Vector3<f64>]) -> Result<()> {
    spec.validate(model.n_vertices())?;
    if targets.len() != spec.landmarks().len() {
        return Err(Error::dim("landmark targets", spec.landmarks().len(), targets.len()));
    }
    if targets.iter().any(|t| !t.iter().all(|c| c.is_finite())) {
        return Err(Error::NonFinite("landmark targets".into()));
    }
    Ok(())
}

/// Smallest singular value of the landmark-restricted basis, relative to
/// the largest. Zero for a rank-deficient landmark set.
pub fn landmark_conditioning(model: &MorphableModel, spec: &LandmarkSpec) -> f64 {
    let (design, _) = landmark_system(model, spec);
    let sv = design.singular_values();
    let max = sv.max();
    if max == 0.0 {
        0.0
    } else {
        sv.min() / max
    }
}

pub fn fit(
    model: &MorphableModel,
    spec: &LandmarkSpec,
    targets: &[Vector3<f64>],
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    check_targets(model, spec, targets)?;
    let (ps, pe) = (model.shape_dim(), model.expr_dim());
    let (design, mean) = landmark_system(model, spec);
    let m = design.nrows();
    let p = ps + pe;

    let mut aug = DMatrix::zeros(m + p, p);
    aug.view_mut((0, 0), (m, p)).copy_from(&design);
    for k in 0..p {
        let lambda = if k < ps { cfg.shape_reg } else { cfg.expr_reg };
        aug[(m + k, k)] = lambda.sqrt();
    }
    let mut rhs = DVector::zeros(m + p);
    for (k, t) in targets.iter().enumerate() {
        for axis in 0..3 {
            rhs[3 * k + axis] = t[axis] - mean[3 * k + axis];
        }
    }

    let sv = aug.singular_values();
    let max_sv = sv.max();
    let min_sv = sv.min();
    if !(max_sv > 0.0) || min_sv <= RANK_TOLERANCE * max_sv {
        return Err(Error::Singular(format!(
            "landmark fitting system is rank-deficient (singular values {min_sv:.3e} / {max_sv:.3e}); \
             add regularization or choose landmarks that constrain every coefficient"
        )));
    }
    // Householder QR: backward stable, and the system is known to have full column rank.
    let qr = aug.qr();
    let alpha = qr
        .r()
        .solve_upper_triangular(&(qr.q().transpose() * rhs))
        .ok_or_else(|| Error::Singular("triangular factor of the fitting system".into()))?;
    let params = ParamVector::from_stacked(alpha.as_slice(), ps, false);
    if !params.is_finite() {
        return Err(Error::NonFinite("fitted coefficients".into()));
    }
    let residual = residual(model, spec, targets, &params)?;
    Ok(FitResult { params, residual })
}

/// `‖L(params) − targets‖²`, without regularization.
pub fn residual(
    model: &MorphableModel,
    spec: &LandmarkSpec,
    targets: &[Vector3<f64>],
    params: &ParamVector,
) -> Result<f64> {
    check_targets(model, spec, targets)?;
    let mesh = model.synthesize(params)?;
    Ok(spec
        .landmarks()
        .iter()
        .zip(targets)
        .map(|(&v, t)| (mesh.vertices[v] - t).norm_squared())
        .sum())
}

/// The objective `fit` minimizes.
pub fn regularized_objective(
    model: &MorphableModel,
    spec: &LandmarkSpec,
    targets: &[Vector3<f64>],
    params: &ParamVector,
    cfg: &FitConfig,
) -> Result<f64> {
    let data = residual(model, spec, targets, params)?;
    let s: f64 = params.shape.iter().map(|a| a * a).sum();
    let e: f64 = params.expr.iter().map(|a| a * a).sum();
    Ok(data + cfg.shape_reg * s + cfg.expr_reg * e)
}
