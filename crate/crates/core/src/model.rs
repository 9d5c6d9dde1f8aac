//! Linear 3D morphable face model: mean face plus shape and expression
//! subspaces, mesh synthesis, rigid pose, vertex normals, and coefficient
//! (de)normalization.
//!
//! Flat vertex vectors are vertex-major with interleaved coordinates:
//! `[x0, y0, z0, x1, y1, z1, ...]`, so row `3 * v + axis` of a basis
//! matrix belongs to vertex `v`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};

pub type Triangle = [u32; 3];

/// Per-coefficient normalization constants, shape block then expression block.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStats {
    pub shape_mean: Vec<f64>,
    pub shape_std: Vec<f64>,
    pub expr_mean: Vec<f64>,
    pub expr_std: Vec<f64>,
}

impl ParamStats {
    pub fn validate(&self, shape_dim: usize, expr_dim: usize) -> Result<()> {
        check_len("shape_mean", shape_dim, self.shape_mean.len())?;
        check_len("shape_std", shape_dim, self.shape_std.len())?;
        check_len("expr_mean", expr_dim, self.expr_mean.len())?;
        check_len("expr_std", expr_dim, self.expr_std.len())?;
        let all = self
            .shape_mean
            .iter()
            .chain(&self.shape_std)
            .chain(&self.expr_mean)
            .chain(&self.expr_std);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter statistics".into()));
        }
        if self.shape_std.iter().chain(&self.expr_std).any(|&s| s <= 0.0) {
            return Err(Error::Invalid(
                "parameter standard deviations must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    mean_face: DVector<f64>,
    shape_basis: DMatrix<f64>,
    expr_basis: DMatrix<f64>,
    triangles: Arc<[Triangle]>,
    param_stats: Option<ParamStats>,
}

impl MorphableModel {
    pub fn new(
        mean_face: DVector<f64>,
        shape_basis: DMatrix<f64>,
        expr_basis: DMatrix<f64>,
        triangles: Vec<Triangle>,
        param_stats: Option<ParamStats>,
    ) -> Result<Self> {
        let rows = mean_face.len();
        if rows == 0 || rows % 3 != 0 {
            return Err(Error::Invalid(format!(
                "mean face length {rows} is not a positive multiple of 3"
            )));
        }
        let n = rows / 3;
        check_len("shape basis rows", rows, shape_basis.nrows())?;
        check_len("expression basis rows", rows, expr_basis.nrows())?;
        if shape_basis.ncols() == 0 || expr_basis.ncols() == 0 {
            return Err(Error::Invalid("basis matrices need at least one column".into()));
        }
        if mean_face.iter().chain(shape_basis.iter()).chain(expr_basis.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model arrays".into()));
        }
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i as usize >= n) {
                return Err(Error::Invalid(format!(
                    "triangle {t} references vertex {bad} but the model has {n} vertices"
                )));
            }
        }
        if let Some(stats) = &param_stats {
            stats.validate(shape_basis.ncols(), expr_basis.ncols())?;
        }
        Ok(Self {
            mean_face,
            shape_basis,
            expr_basis,
            triangles: triangles.into(),
            param_stats,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.mean_face.len() / 3
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_basis.ncols()
    }

    pub fn expr_dim(&self) -> usize {
        self.expr_basis.ncols()
    }

    pub fn mean_face(&self) -> &DVector<f64> {
        &self.mean_face
    }

    pub fn shape_basis(&self) -> &DMatrix<f64> {
        &self.shape_basis
    }

    pub fn expr_basis(&self) -> &DMatrix<f64> {
        &self.expr_basis
    }

    pub fn triangles(&self) -> &Arc<[Triangle]> {
        &self.triangles
    }

    pub fn param_stats(&self) -> Option<&ParamStats> {
        self.param_stats.as_ref()
    }

    /// Zero coefficients in raw (denormalized) space.
    pub fn zero_params(&self) -> ParamVector {
        ParamVector::zeros(self.shape_dim(), self.expr_dim())
    }

    pub fn mean_mesh(&self) -> FaceMesh {
        FaceMesh::from_flat(&self.mean_face, self.triangles.clone())
    }

    /// `mean + shape_basis * shape + expr_basis * expr`, reshaped to vertices.
    pub fn synthesize(&self, params: &ParamVector) -> Result<FaceMesh> {
        if params.normalized {
            return Err(Error::NormalizedParams);
        }
        self.check_params(params)?;
        let flat = self.flat_geometry(&params.shape, &params.expr);
        Ok(FaceMesh::from_flat(&flat, self.triangles.clone()))
    }

    pub(crate) fn flat_geometry(&self, shape: &[f64], expr: &[f64]) -> DVector<f64> {
        let alpha_s = DVector::from_column_slice(shape);
        let alpha_e = DVector::from_column_slice(expr);
        let mut flat = self.mean_face.clone();
        flat.gemv(1.0, &self.shape_basis, &alpha_s, 1.0);
        flat.gemv(1.0, &self.expr_basis, &alpha_e, 1.0);
        flat
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        check_len("shape coefficients", self.shape_dim(), params.shape.len())?;
        check_len("expression coefficients", self.expr_dim(), params.expr.len())?;
        if !params.is_finite() {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(())
    }

    pub fn normalize_params(&self, params: &ParamVector) -> Result<ParamVector> {
        normalize_params(params, self.param_stats.as_ref())
    }

    pub fn denormalize_params(&self, params: &ParamVector) -> Result<ParamVector> {
        denormalize_params(params, self.param_stats.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Arc<[Triangle]>,
}

impl FaceMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<Triangle>) -> Result<Self> {
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("mesh vertices".into()));
        }
        let n = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i as usize >= n) {
                return Err(Error::Invalid(format!(
                    "triangle {t} references vertex {bad} but the mesh has {n} vertices"
                )));
            }
        }
        Ok(Self {
            vertices,
            triangles: triangles.into(),
        })
    }

    fn from_flat(flat: &DVector<f64>, triangles: Arc<[Triangle]>) -> Self {
        let vertices = flat
            .as_slice()
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
        Self { vertices, triangles }
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
    }

    /// Same topology, vertices replaced.
    pub fn with_vertices(&self, vertices: Vec<Vector3<f64>>) -> Self {
        debug_assert_eq!(vertices.len(), self.vertices.len());
        Self {
            vertices,
            triangles: self.triangles.clone(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.with_vertices(self.vertices.iter().map(|v| v * factor).collect())
    }

    pub fn translated(&self, offset: &Vector3<f64>) -> Self {
        self.with_vertices(self.vertices.iter().map(|v| v + offset).collect())
    }

    pub fn apply_pose(&self, xf: &RigidTransform) -> Self {
        self.with_vertices(self.vertices.iter().map(|v| xf.apply(v)).collect())
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        bounding_box(&self.vertices)
    }

    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    /// Same mesh with every triangle's winding reversed.
    pub fn flipped(&self) -> Self {
        let tris: Vec<Triangle> = self.triangles.iter().map(|t| [t[0], t[2], t[1]]).collect();
        Self {
            vertices: self.vertices.clone(),
            triangles: tris.into(),
        }
    }

    pub fn vertex_normals(&self) -> Result<Vec<Vector3<f64>>> {
        vertex_normals(self)
    }
}

pub(crate) fn bounding_box(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Shape (`α_s`) and expression (`α_e`) coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub shape: Vec<f64>,
    pub expr: Vec<f64>,
    pub normalized: bool,
}

impl ParamVector {
    pub fn new(shape: Vec<f64>, expr: Vec<f64>, normalized: bool) -> Self {
        Self {
            shape,
            expr,
            normalized,
        }
    }

    pub fn zeros(shape_dim: usize, expr_dim: usize) -> Self {
        Self::new(vec![0.0; shape_dim], vec![0.0; expr_dim], false)
    }

    pub fn len(&self) -> usize {
        self.shape.len() + self.expr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.shape.iter().chain(&self.expr).all(|v| v.is_finite())
    }

    /// Shape block followed by expression block.
    pub fn stacked(&self) -> Vec<f64> {
        self.shape.iter().chain(&self.expr).copied().collect()
    }

    pub fn from_stacked(values: &[f64], shape_dim: usize, normalized: bool) -> Self {
        Self::new(
            values[..shape_dim].to_vec(),
            values[shape_dim..].to_vec(),
            normalized,
        )
    }

    pub fn same_dims(&self, other: &ParamVector) -> Result<()> {
        check_len("shape coefficients", self.shape.len(), other.shape.len())?;
        check_len("expression coefficients", self.expr.len(), other.expr.len())
    }
}

pub fn normalize_params(params: &ParamVector, stats: Option<&ParamStats>) -> Result<ParamVector> {
    let stats = stats.ok_or(Error::MissingStats)?;
    if params.normalized {
        return Err(Error::NormalizationState { expected: false });
    }
    stats.validate(params.shape.len(), params.expr.len())?;
    let map = |v: &[f64], m: &[f64], s: &[f64]| -> Vec<f64> {
        v.iter().zip(m).zip(s).map(|((x, m), s)| (x - m) / s).collect()
    };
    Ok(ParamVector::new(
        map(&params.shape, &stats.shape_mean, &stats.shape_std),
        map(&params.expr, &stats.expr_mean, &stats.expr_std),
        true,
    ))
}

pub fn denormalize_params(params: &ParamVector, stats: Option<&ParamStats>) -> Result<ParamVector> {
    let stats = stats.ok_or(Error::MissingStats)?;
    if !params.normalized {
        return Err(Error::NormalizationState { expected: true });
    }
    stats.validate(params.shape.len(), params.expr.len())?;
    let map = |v: &[f64], m: &[f64], s: &[f64]| -> Vec<f64> {
        v.iter().zip(m).zip(s).map(|((x, m), s)| x * s + m).collect()
    };
    Ok(ParamVector::new(
        map(&params.shape, &stats.shape_mean, &stats.shape_std),
        map(&params.expr, &stats.expr_mean, &stats.expr_std),
        false,
    ))
}

/// Rotation followed by translation: `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

pub const ROTATION_TOLERANCE: f64 = 1e-9;

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rigid transform".into()));
        }
        let deviation = rotation_deviation(&rotation);
        if deviation > ROTATION_TOLERANCE {
            return Err(Error::NotARotation { deviation });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = if axis.norm() == 0.0 {
            Matrix3::identity()
        } else {
            *Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).matrix()
        };
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v + self.translation
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let cos = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        cos.acos()
    }

    /// Geodesic interpolation from identity: `fraction` of the rotation
    /// angle about the same axis, `fraction` of the translation.
    pub fn scaled(&self, fraction: f64) -> RigidTransform {
        let rot = Rotation3::from_matrix(&self.rotation);
        let rotation = *Rotation3::new(rot.scaled_axis() * fraction).matrix();
        RigidTransform {
            rotation,
            translation: self.translation * fraction,
        }
    }
}

/// `max(‖RᵀR − I‖_max, |det R − 1|)`.
pub fn rotation_deviation(rotation: &Matrix3<f64>) -> f64 {
    let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
    ortho.max((rotation.determinant() - 1.0).abs())
}

pub fn apply_pose(mesh: &FaceMesh, xf: &RigidTransform) -> Result<FaceMesh> {
    let deviation = rotation_deviation(xf.rotation());
    if deviation > ROTATION_TOLERANCE {
        return Err(Error::NotARotation { deviation });
    }
    Ok(mesh.apply_pose(xf))
}

/// Area-weighted unit vertex normals.
///
/// Each face contributes its unnormalized cross product (twice its area
/// times its unit normal) to its three corners. Counter-clockwise winding
/// seen from outside gives outward normals.
pub fn vertex_normals(mesh: &FaceMesh) -> Result<Vec<Vector3<f64>>> {
    if mesh.triangles.is_empty() {
        return Err(Error::Empty("mesh has no triangles".into()));
    }
    let verts = &mesh.vertices;
    let mut acc = vec![Vector3::zeros(); verts.len()];
    for tri in mesh.triangles.iter() {
        let [a, b, c] = tri.map(|i| i as usize);
        let n = (verts[b] - verts[a]).cross(&(verts[c] - verts[a]));
        for i in [a, b, c] {
            acc[i] += n;
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len > 0.0 && len.is_finite() {
                Ok(n / len)
            } else {
                Err(Error::IsolatedVertex(i))
            }
        })
        .collect()
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::dim(what, expected, got))
    }
}
