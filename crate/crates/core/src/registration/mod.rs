//! Rigid point-to-plane ICP between a predicted and a reference mesh.
//!
//! Source (predicted) points query the target (reference) vertices. Scale
//! is never estimated.

mod index;

pub use index::{linear_scan_nearest, Neighbor, NearestNeighborIndex};

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::model::{FaceMesh, RigidTransform};

/// Eigenvalues of the 6×6 normal matrix below this fraction of the largest
/// are treated as unconstrained directions.
pub const PLANE_RANK_TOLERANCE: f64 = 1e-10;

/// Step-halving attempts before an iteration that raises the RMSE is
/// abandoned.
const MAX_BACKTRACKS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Stop when the relative RMSE decrease falls below this.
    pub rel_tol: f64,
    /// Correspondences farther than `reject_multiplier × median` are dropped.
    pub reject_multiplier: f64,
    pub seed_transform: Option<RigidTransform>,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rel_tol: 1e-6,
            reject_multiplier: 3.0,
            seed_transform: None,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Invalid("max_iters must be positive".into()));
        }
        for (name, v) in [("rel_tol", self.rel_tol), ("reject_multiplier", self.reject_multiplier)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps source points onto the target.
    pub transform: RigidTransform,
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// RMSE before the first iteration followed by the RMSE after every
    /// accepted iteration.
    pub rmse_history: Vec<f64>,
}

/// Linearized point-to-plane solve, including rank information.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    pub transform: RigidTransform,
    /// Rank of the 6×6 normal system.
    pub rank: usize,
    /// Null-space directions `(ω, t)` of the normal system, with rotation
    /// taken about the source centroid. Motion along these is not
    /// determined by the data and is set to zero.
    pub unconstrained: Vec<Vector6<f64>>,
}

/// Minimizer of `Σ ((R sᵢ + t − dᵢ)·nᵢ)²` for fixed correspondences, solved
/// with the small-angle model `R ≈ I + [ω]×` and polar projection back
/// onto a proper rotation.
///
/// Fails with [`Error::RankDeficient`] when the normals leave any rigid
/// degree of freedom unconstrained; see [`estimate_rigid_point_to_plane_partial`]
/// for the minimum-norm solution in that case.
pub fn estimate_rigid_point_to_plane(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    dst_normals: &[Vector3<f64>],
) -> Result<RigidTransform> {
    let fit = estimate_rigid_point_to_plane_partial(src, dst, dst_normals)?;
    if fit.rank < 6 {
        return Err(Error::RankDeficient { rank: fit.rank });
    }
    Ok(fit.transform)
}

/// Like [`estimate_rigid_point_to_plane`], but returns the minimum-norm
/// solution with its rank when some directions are unconstrained.
///
/// The small-angle solve is repeated about the current estimate (at most
/// [`MAX_RELINEARIZATIONS`] times) so the dropped second-order rotation
/// terms do not bias the result for moderate angles.
pub fn estimate_rigid_point_to_plane_partial(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    dst_normals: &[Vector3<f64>],
) -> Result<PlaneFit> {
    let k = src.len();
    if dst.len() != k || dst_normals.len() != k {
        return Err(Error::dim("point-to-plane correspondences", k, dst.len().min(dst_normals.len())));
    }
    if k < 6 {
        return Err(Error::Invalid(format!(
            "a rigid point-to-plane solve needs at least 6 correspondences, got {k}"
        )));
    }
    let mut fit = linearized_step(src, dst, dst_normals)?;
    let scale = rms_radius(src).max(f64::MIN_POSITIVE);
    let mut moved: Vec<Vector3<f64>> = Vec::with_capacity(k);
    for _ in 1..MAX_RELINEARIZATIONS {
        moved.clear();
        moved.extend(src.iter().map(|p| fit.transform.apply(p)));
        let step = linearized_step(&moved, dst, dst_normals)?;
        fit.transform = step.transform.compose(&fit.transform);
        let size = step.transform.rotation_angle() + step.transform.translation().norm() / scale;
        if size < 1e-14 {
            break;
        }
    }
    Ok(fit)
}

pub const MAX_RELINEARIZATIONS: usize = 8;

fn rms_radius(points: &[Vector3<f64>]) -> f64 {
    let k = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / k;
    (points.iter().map(|s| (s - centroid).norm_squared()).sum::<f64>() / k).sqrt()
}

/// One small-angle solve about the identity.
fn linearized_step(src: &[Vector3<f64>], dst: &[Vector3<f64>], dst_normals: &[Vector3<f64>]) -> Result<PlaneFit> {
    let k = src.len();
    // Centering on the source centroid decouples rotation from translation;
    // rotation columns are scaled by the RMS radius so all six unknowns share
    // units of length.
    let centroid = src.iter().sum::<Vector3<f64>>() / k as f64;
    let radius = rms_radius(src);
    let scale = if radius > 0.0 { radius } else { 1.0 };

    let mut ata = Matrix6::zeros();
    let mut atb = Vector6::zeros();
    for ((s, d), n) in src.iter().zip(dst).zip(dst_normals) {
        let sc = s - centroid;
        let rot = sc.cross(n) / scale;
        let row = Vector6::new(rot.x, rot.y, rot.z, n.x, n.y, n.z);
        let b = -(s - d).dot(n);
        ata += row * row.transpose();
        atb += row * b;
    }
    if !ata.iter().chain(atb.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("point-to-plane system".into()));
    }

    let eig = SymmetricEigen::new(ata);
    let max_ev = eig.eigenvalues.max();
    let cutoff = PLANE_RANK_TOLERANCE * max_ev.max(f64::MIN_POSITIVE);
    let mut x = Vector6::zeros();
    let mut rank = 0;
    let mut unconstrained = Vec::new();
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i).into_owned();
        if ev > cutoff {
            rank += 1;
            x += v * (v.dot(&atb) / ev);
        } else {
            let mut dir = v;
            for r in 0..3 {
                dir[r] /= scale;
            }
            unconstrained.push(dir.normalize());
        }
    }

    let omega = Vector3::new(x[0], x[1], x[2]) / scale;
    let t_centered = Vector3::new(x[3], x[4], x[5]);
    let linear = Matrix3::identity() + omega.cross_matrix();
    let rotation = nearest_rotation(&linear);
    // x -> R (x - c) + c + t'
    let translation = centroid + t_centered - rotation * centroid;
    Ok(PlaneFit {
        transform: RigidTransform::new(rotation, translation)?,
        rank,
        unconstrained,
    })
}

/// Polar projection onto SO(3).
fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// `sqrt(mean ((pᵢ − qᵢ)·nᵢ)²)` with `qᵢ` the nearest target vertex to `pᵢ`
/// and `nᵢ` its normal.
pub fn point_to_plane_rmse(src: &[Vector3<f64>], target: &FaceMesh, target_normals: &[Vector3<f64>]) -> Result<f64> {
    if target.vertices.len() != target_normals.len() {
        return Err(Error::dim("target normals", target.vertices.len(), target_normals.len()));
    }
    let index = NearestNeighborIndex::new(&target.vertices)?;
    rmse_with_index(src, &index, target_normals)
}

pub fn rmse_with_index(src: &[Vector3<f64>], index: &NearestNeighborIndex, normals: &[Vector3<f64>]) -> Result<f64> {
    if src.is_empty() {
        return Err(Error::Empty("no source points".into()));
    }
    let sum: f64 = src
        .iter()
        .map(|p| {
            let hit = index.nearest(p);
            (p - index.points()[hit.index]).dot(&normals[hit.index]).powi(2)
        })
        .sum();
    Ok((sum / src.len() as f64).sqrt())
}

/// ICP of a source mesh onto a target mesh, using target vertex normals.
pub fn icp(source: &FaceMesh, target: &FaceMesh, cfg: &IcpConfig) -> Result<IcpResult> {
    if source.vertices.is_empty() || target.vertices.is_empty() {
        return Err(Error::Empty("ICP needs non-empty meshes".into()));
    }
    let normals = target.vertex_normals()?;
    icp_points(&source.vertices, &target.vertices, &normals, cfg)
}

/// ICP over raw point sets. `target_normals` must be unit length.
pub fn icp_points(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    target_normals: &[Vector3<f64>],
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Empty("ICP source has no points".into()));
    }
    if target.len() != target_normals.len() {
        return Err(Error::dim("target normals", target.len(), target_normals.len()));
    }
    let index = NearestNeighborIndex::new(target)?;
    let moved = |xf: &RigidTransform| -> Vec<Vector3<f64>> { source.iter().map(|p| xf.apply(p)).collect() };
    let rmse_at = |xf: &RigidTransform| -> Result<f64> {
        let r = rmse_with_index(&moved(xf), &index, target_normals)?;
        if r.is_finite() {
            Ok(r)
        } else {
            Err(Error::NonFinite("ICP RMSE".into()))
        }
    };

    let mut xf = cfg.seed_transform.unwrap_or_else(RigidTransform::identity);
    let mut rmse = rmse_at(&xf)?;
    let mut history = vec![rmse];
    let mut iterations = 0;
    let mut converged = rmse == 0.0;

    while !converged && iterations < cfg.max_iters {
        let current = moved(&xf);
        let hits: Vec<Neighbor> = current.iter().map(|p| index.nearest(p)).collect();
        let mut dists: Vec<f64> = hits.iter().map(Neighbor::distance).collect();
        let mid = dists.len() / 2;
        let median = *dists.select_nth_unstable_by(mid, f64::total_cmp).1;
        let limit = cfg.reject_multiplier * median;

        let mut src = Vec::with_capacity(current.len());
        let mut dst = Vec::with_capacity(current.len());
        let mut nrm = Vec::with_capacity(current.len());
        for (p, hit) in current.iter().zip(&hits) {
            if hit.distance() <= limit {
                src.push(*p);
                dst.push(target[hit.index]);
                nrm.push(target_normals[hit.index]);
            }
        }
        // Directions the current correspondences leave unconstrained are not moved.
        let step = estimate_rigid_point_to_plane_partial(&src, &dst, &nrm)?.transform;

        // Backtrack along the step until the RMSE does not increase.
        let mut accepted = None;
        let mut fraction = 1.0;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = step.scaled(fraction).compose(&xf);
            let cand_rmse = rmse_at(&candidate)?;
            if cand_rmse <= rmse {
                accepted = Some((candidate, cand_rmse));
                break;
            }
            fraction *= 0.5;
        }
        let Some((candidate, cand_rmse)) = accepted else {
            // No descent left from these correspondences: a fixed point.
            converged = true;
            break;
        };
        iterations += 1;
        let decrease = (rmse - cand_rmse) / rmse;
        xf = candidate;
        rmse = cand_rmse;
        history.push(rmse);
        if rmse == 0.0 || decrease < cfg.rel_tol {
            converged = true;
        }
    }

    Ok(IcpResult {
        transform: xf,
        rmse,
        iterations,
        converged,
        rmse_history: history,
    })
}
