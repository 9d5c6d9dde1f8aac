//! Seeded desk-scale stand-ins for a licensed face model and a paired
//! voice/face dataset.
//!
//! All randomness comes from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64(seed)`, one stream per purpose (see [`Stream`]), so a
//! given seed produces the same bits on every platform.
//!
//! Geometry: the mean face is the front patch of an ellipsoid (half axes
//! 0.8 × 1.0 × 0.7, facing +z, y up) sampled on a regular azimuth/elevation
//! grid, with a nose bump and a few seeded low-amplitude bumps. Subject's
//! left is +x.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fitting::{Anchors, LandmarkSpec, Region, LANDMARK_COUNT};
use crate::model::{MorphableModel, ParamStats, ParamVector, Triangle};

pub const MIN_VERTICES: usize = 12;

const HALF_AXES: [f64; 3] = [0.8, 1.0, 0.7];
const AZIMUTH_MAX: f64 = 75.0 * std::f64::consts::PI / 180.0;
const ELEVATION_MAX: f64 = 60.0 * std::f64::consts::PI / 180.0;
const SHAPE_STD: f64 = 1.0;
const EXPR_STD: f64 = 0.5;
const MIN_LANDMARK_SINGULAR_VALUE: f64 = 1e-6;
const MAX_BASIS_ATTEMPTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Geometry = 0,
    Basis = 1,
    HiddenMap = 2,
    Samples = 3,
}

pub fn seeded_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_vertices: usize,
    pub shape_dim: usize,
    pub expr_dim: usize,
    pub n_identities: usize,
    pub embedding_dim: usize,
    pub noise_sigma: f64,
    pub hidden_map_scale: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_vertices: 500,
            shape_dim: 40,
            expr_dim: 10,
            n_identities: 1000,
            embedding_dim: 64,
            noise_sigma: 0.0,
            hidden_map_scale: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_vertices < MIN_VERTICES {
            return Err(Error::Invalid(format!(
                "at least {MIN_VERTICES} vertices are needed for the template triangulation, got {}",
                self.n_vertices
            )));
        }
        for (name, v) in [
            ("shape_dim", self.shape_dim),
            ("expr_dim", self.expr_dim),
            ("n_identities", self.n_identities),
            ("embedding_dim", self.embedding_dim),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if self.shape_dim + self.expr_dim > 3 * self.n_vertices {
            return Err(Error::Invalid(format!(
                "{} basis columns cannot be orthonormal in {} dimensions",
                self.shape_dim + self.expr_dim,
                3 * self.n_vertices
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Invalid("noise_sigma must be finite and >= 0".into()));
        }
        if !self.hidden_map_scale.is_finite() || self.hidden_map_scale <= 0.0 {
            return Err(Error::Invalid("hidden_map_scale must be finite and > 0".into()));
        }
        Ok(())
    }
}

fn grid_dims(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    (rows, cols)
}

/// Grid triangulation with counter-clockwise winding seen from +z. A
/// partially filled last row is stitched to the row below it.
fn grid_triangles(n: usize, rows: usize, cols: usize) -> Vec<Triangle> {
    let idx = |r: usize, c: usize| (r * cols + c) as u32;
    let mut tris = Vec::new();
    for r in 0..rows - 1 {
        let upper = if r + 1 == rows - 1 { n - (rows - 1) * cols } else { cols };
        for c in 0..cols - 1 {
            let (a, b) = (idx(r, c), idx(r, c + 1));
            if c + 1 < upper {
                let (d, e) = (idx(r + 1, c + 1), idx(r + 1, c));
                tris.push([a, b, d]);
                tris.push([a, d, e]);
            } else if c < upper {
                tris.push([a, b, idx(r + 1, c)]);
            }
        }
    }
    tris
}

fn mean_face(n: usize, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let [ax, ay, az] = HALF_AXES;
    let bumps: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let cx = rng.random_range(-0.5..0.5) * ax;
            let cy = rng.random_range(-0.6..0.6) * ay;
            let amp = 0.02 * rng.sample::<f64, _>(StandardNormal);
            (cx, cy, amp)
        })
        .collect();
    (0..n)
        .map(|k| {
            let (r, c) = (k / cols, k % cols);
            let u = c as f64 / (cols - 1) as f64;
            let v = r as f64 / (rows - 1) as f64;
            let theta = (2.0 * u - 1.0) * AZIMUTH_MAX;
            let phi = (2.0 * v - 1.0) * ELEVATION_MAX;
            let x = ax * phi.cos() * theta.sin();
            let y = ay * phi.sin();
            let mut z = az * phi.cos() * theta.cos();
            z += 0.18 * (-(x / 0.18).powi(2) - ((y + 0.05) / 0.3).powi(2)).exp();
            for &(cx, cy, amp) in &bumps {
                z += amp * (-((x - cx).powi(2) + (y - cy).powi(2)) / 0.0625).exp();
            }
            Vector3::new(x, y, z)
        })
        .collect()
}

/// Orthonormal `[V_s V_e]`. Column 0 widens the face edges: its x
/// displacement grows with the cube of the normalized x offset, so it
/// changes the ear-to-ear distance much more than the eye-corner distance.
fn orthonormal_bases(vertices: &[Vector3<f64>], cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let rows = 3 * vertices.len();
    let (lo, hi) = crate::model::bounding_box(vertices);
    let cx = 0.5 * (lo.x + hi.x);
    let hx = 0.5 * (hi.x - lo.x);
    let mut raw = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let knob = DVector::from_fn(rows, |i, _| {
        if i % 3 == 0 {
            hx * ((vertices[i / 3].x - cx) / hx).powi(3)
        } else {
            0.0
        }
    });
    raw.set_column(0, &knob);
    let mut q = raw.qr().q();
    if q.column(0).dot(&knob) < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

/// Ellipsoid-patch morphable model with orthonormal bases and populated
/// normalization statistics.
///
/// When the model is large enough to carry 68 landmarks, the bases are
/// redrawn (from the same stream) until the landmark-restricted system has
/// smallest singular value above 1e-6.
pub fn gen_model(cfg: &SyntheticConfig) -> Result<MorphableModel> {
    cfg.validate()?;
    let n = cfg.n_vertices;
    let (rows, cols) = grid_dims(n);
    let vertices = mean_face(n, rows, cols, &mut seeded_rng(cfg.seed, Stream::Geometry));
    let triangles = grid_triangles(n, rows, cols);
    let mean = DVector::from_iterator(3 * n, vertices.iter().flat_map(|v| [v.x, v.y, v.z]));
    let (ps, pe) = (cfg.shape_dim, cfg.expr_dim);
    let stats = ParamStats {
        shape_mean: vec![0.0; ps],
        shape_std: (0..ps).map(|k| SHAPE_STD / ((1 + k) as f64).sqrt()).collect(),
        expr_mean: vec![0.0; pe],
        expr_std: (0..pe).map(|k| EXPR_STD / ((1 + k) as f64).sqrt()).collect(),
    };

    let mut rng = seeded_rng(cfg.seed, Stream::Basis);
    for _ in 0..MAX_BASIS_ATTEMPTS {
        let q = orthonormal_bases(&vertices, ps + pe, &mut rng);
        let model = MorphableModel::new(
            mean.clone(),
            q.columns(0, ps).into_owned(),
            q.columns(ps, pe).into_owned(),
            triangles.clone(),
            Some(stats.clone()),
        )?;
        if n < LANDMARK_COUNT {
            return Ok(model);
        }
        let spec = gen_landmark_spec(&model)?;
        if min_landmark_singular_value(&model, &spec) > MIN_LANDMARK_SINGULAR_VALUE {
            return Ok(model);
        }
    }
    Err(Error::Singular(
        "could not draw a basis with a full-rank landmark system".into(),
    ))
}

pub fn min_landmark_singular_value(model: &MorphableModel, spec: &LandmarkSpec) -> f64 {
    let rows: Vec<usize> = spec
        .landmarks()
        .iter()
        .flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2])
        .collect();
    let ps = model.shape_dim();
    let pe = model.expr_dim();
    let design = DMatrix::from_fn(rows.len(), ps + pe, |r, c| {
        if c < ps {
            model.shape_basis()[(rows[r], c)]
        } else {
            model.expr_basis()[(rows[r], c - ps)]
        }
    });
    design.singular_values().min()
}

fn nearest_in_plane(vertices: &[Vector3<f64>], x: f64, y: f64) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, v) in vertices.iter().enumerate() {
        let d = (v.x - x).powi(2) + (v.y - y).powi(2);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Derives anchors, 68 landmarks, and six regions from the mean face.
///
/// With `(xn, yn)` the mean-face coordinates normalized to `[-1, 1]` by the
/// bounding box:
/// - `A`/`B`: minimum/maximum x vertex; the other anchors are the vertices
///   nearest (in the x-y plane) to `C/D (∓0.5, 0.7)`, `E/F (∓0.45, 0.3)`,
///   `G (0, 0.6)`, `H (0, −0.8)`, `I/J (∓0.7, −0.2)`.
/// - landmarks: farthest-point sampling over the front half (z above the
///   mid-depth), seeded at the frontmost vertex.
/// - regions, first match wins: eyes `0.15 ≤ |xn| ≤ 0.7, 0.1 ≤ yn ≤ 0.5`;
///   nose `|xn| < 0.15, |yn| ≤ 0.3`; mouth `|xn| < 0.3, −0.75 ≤ yn ≤ −0.4`;
///   cheeks `0.3 ≤ |xn| ≤ 0.8, −0.5 ≤ yn < 0`. Left is +x.
pub fn gen_landmark_spec(model: &MorphableModel) -> Result<LandmarkSpec> {
    let mesh = model.mean_mesh();
    let verts = &mesh.vertices;
    let n = verts.len();
    if n < LANDMARK_COUNT {
        return Err(Error::Invalid(format!(
            "{n} vertices cannot hold {LANDMARK_COUNT} distinct landmarks"
        )));
    }
    let (lo, hi) = mesh.bounding_box();
    let center = (lo + hi) / 2.0;
    let half = (hi - lo) / 2.0;
    if !(half.x > 1e-9 && half.y > 1e-9) {
        return Err(Error::Invalid("degenerate model extent".into()));
    }
    let at = |xn: f64, yn: f64| nearest_in_plane(verts, center.x + xn * half.x, center.y + yn * half.y);
    let extreme = |sign: f64| {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, v) in verts.iter().enumerate() {
            if sign * v.x > best.0 {
                best = (sign * v.x, i);
            }
        }
        best.1
    };
    let anchors = Anchors {
        a: extreme(-1.0),
        b: extreme(1.0),
        c: at(-0.5, 0.7),
        d: at(0.5, 0.7),
        e: at(-0.45, 0.3),
        f: at(0.45, 0.3),
        g: at(0.0, 0.6),
        h: at(0.0, -0.8),
        i: at(-0.7, -0.2),
        j: at(0.7, -0.2),
    };
    let arr = anchors.as_array();
    if arr.chunks(2).any(|p| p[0] == p[1]) {
        return Err(Error::Invalid(
            "mesh too coarse: a distance line collapsed to one vertex".into(),
        ));
    }

    let mut pool: Vec<usize> = (0..n).filter(|&i| verts[i].z >= center.z).collect();
    if pool.len() < LANDMARK_COUNT {
        pool = (0..n).collect();
    }
    let landmarks = farthest_point_sampling(verts, &pool, LANDMARK_COUNT);

    let mut regions: BTreeMap<Region, Vec<usize>> =
        Region::ALL.into_iter().map(|r| (r, Vec::new())).collect();
    for (i, v) in verts.iter().enumerate() {
        let xn = (v.x - center.x) / half.x;
        let yn = (v.y - center.y) / half.y;
        let ax = xn.abs();
        let side = |left, right| if xn > 0.0 { left } else { right };
        let region = if (0.15..=0.7).contains(&ax) && (0.1..=0.5).contains(&yn) {
            Some(side(Region::LeftEye, Region::RightEye))
        } else if ax < 0.15 && yn.abs() <= 0.3 {
            Some(Region::Nose)
        } else if ax < 0.3 && (-0.75..=-0.4).contains(&yn) {
            Some(Region::Mouth)
        } else if (0.3..=0.8).contains(&ax) && (-0.5..0.0).contains(&yn) {
            Some(side(Region::LeftCheek, Region::RightCheek))
        } else {
            None
        };
        if let Some(r) = region {
            regions.get_mut(&r).unwrap().push(i);
        }
    }
    if let Some((r, _)) = regions.iter().find(|(_, m)| m.is_empty()) {
        return Err(Error::Invalid(format!("mesh too coarse: region '{r}' is empty")));
    }
    LandmarkSpec::new(anchors, landmarks, regions, n)
}

fn farthest_point_sampling(verts: &[Vector3<f64>], pool: &[usize], count: usize) -> Vec<usize> {
    let start = pool
        .iter()
        .copied()
        .fold(pool[0], |best, i| if verts[i].z > verts[best].z { i } else { best });
    let mut chosen = vec![start];
    let mut dist: Vec<f64> = pool.iter().map(|&i| (verts[i] - verts[start]).norm_squared()).collect();
    while chosen.len() < count {
        let (k, _) = dist
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &d)| if d > best.1 { (k, d) } else { best });
        let next = pool[k];
        chosen.push(next);
        for (d, &i) in dist.iter_mut().zip(pool) {
            *d = d.min((verts[i] - verts[next]).norm_squared());
        }
    }
    chosen
}

/// One paired training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub embedding: Vec<f64>,
    /// Normalized coefficients.
    pub params: ParamVector,
    /// Landmark rows of the synthesized (denormalized) mesh.
    pub landmarks: Vec<Vector3<f64>>,
}

/// `embedding_dim × (P_s + P_e)` map from normalized coefficients to
/// embeddings, entries `N(0, 1) · hidden_map_scale / √(P_s + P_e)`.
pub fn hidden_map(cfg: &SyntheticConfig) -> DMatrix<f64> {
    let p = cfg.shape_dim + cfg.expr_dim;
    let scale = cfg.hidden_map_scale / (p as f64).sqrt();
    let mut rng = seeded_rng(cfg.seed, Stream::HiddenMap);
    DMatrix::from_fn(cfg.embedding_dim, p, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn gen_dataset(model: &MorphableModel, spec: &LandmarkSpec, cfg: &SyntheticConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    spec.validate(model.n_vertices())?;
    if cfg.shape_dim != model.shape_dim() || cfg.expr_dim != model.expr_dim() {
        return Err(Error::Invalid(format!(
            "config dimensions {}/{} do not match the model's {}/{}",
            cfg.shape_dim,
            cfg.expr_dim,
            model.shape_dim(),
            model.expr_dim()
        )));
    }
    let map = hidden_map(cfg);
    let mut rng = seeded_rng(cfg.seed, Stream::Samples);
    let p = cfg.shape_dim + cfg.expr_dim;
    (0..cfg.n_identities)
        .map(|_| {
            let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            let params = ParamVector::from_stacked(&z, cfg.shape_dim, true);
            let mut emb = &map * DVector::from_column_slice(&z);
            if cfg.noise_sigma > 0.0 {
                for e in emb.iter_mut() {
                    *e += cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let mesh = model.synthesize(&model.denormalize_params(&params)?)?;
            Ok(Sample {
                embedding: emb.as_slice().to_vec(),
                landmarks: spec.landmark_points(&mesh.vertices),
                params,
            })
        })
        .collect()
}
