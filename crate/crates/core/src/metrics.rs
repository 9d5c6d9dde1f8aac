//! Face-geometry metrics: line-based absolute ratio error (ARE),
//! point-based landmark NME, and region-based point-to-plane RMSE after
//! rigid registration, both holistic and per facial part.
//!
//! Distances are 3D Euclidean in model space; no pose is applied. NME
//! normalizes by the reference face size `sqrt(width × length)` where width
//! and length are the reference bounding-box extents along x (ear to ear)
//! and y (forehead to chin).

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::fitting::{LandmarkSpec, Region};
use crate::model::{FaceMesh, RigidTransform};
use crate::registration::{icp, icp_points, IcpConfig, IcpResult};

/// Minimum region size for a rigid solve.
pub const MIN_REGION_VERTICES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Line {
    /// Ear to ear, `A–B`.
    Er,
    /// Forehead, `C–D`.
    Fr,
    /// Midline, `G–H`.
    Mr,
    /// Cheek to cheek, `I–J`.
    Cr,
}

impl Line {
    pub const ALL: [Line; 4] = [Line::Er, Line::Fr, Line::Mr, Line::Cr];

    pub fn key(self) -> &'static str {
        match self {
            Line::Er => "ER",
            Line::Fr => "FR",
            Line::Mr => "MR",
            Line::Cr => "CR",
        }
    }

    pub fn endpoints(self, spec: &LandmarkSpec) -> (usize, usize) {
        let a = spec.anchors();
        match self {
            Line::Er => (a.a, a.b),
            Line::Fr => (a.c, a.d),
            Line::Mr => (a.g, a.h),
            Line::Cr => (a.i, a.j),
        }
    }
}

impl fmt::Display for Line {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Length of `line` divided by the outer-interocular distance `‖E − F‖`.
pub fn distance_ratio(mesh: &FaceMesh, spec: &LandmarkSpec, line: Line) -> Result<f64> {
    spec.validate(mesh.n_vertices())?;
    let v = &mesh.vertices;
    let anchors = spec.anchors();
    let oicd = (v[anchors.e] - v[anchors.f]).norm();
    if !(oicd > 0.0) {
        return Err(Error::Invalid(
            "outer eye corners E and F coincide; distance ratios are undefined".into(),
        ));
    }
    let (p, q) = line.endpoints(spec);
    Ok((v[p] - v[q]).norm() / oicd)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreBlock {
    pub er: f64,
    pub fr: f64,
    pub mr: f64,
    pub cr: f64,
    pub mean: f64,
}

impl AreBlock {
    pub fn from_components(er: f64, fr: f64, mr: f64, cr: f64) -> Self {
        Self {
            er,
            fr,
            mr,
            cr,
            mean: (er + fr + mr + cr) / 4.0,
        }
    }

    pub fn get(&self, line: Line) -> f64 {
        match line {
            Line::Er => self.er,
            Line::Fr => self.fr,
            Line::Mr => self.mr,
            Line::Cr => self.cr,
        }
    }
}

/// Per-line `|ratio(pred) − ratio(ref)|` and their mean.
pub fn are(pred: &FaceMesh, reference: &FaceMesh, spec: &LandmarkSpec) -> Result<AreBlock> {
    let mut err = [0.0; 4];
    for (slot, line) in err.iter_mut().zip(Line::ALL) {
        *slot = (distance_ratio(pred, spec, line)? - distance_ratio(reference, spec, line)?).abs();
    }
    Ok(AreBlock::from_components(err[0], err[1], err[2], err[3]))
}

/// `sqrt(width × length)` of a mesh's bounding box in the x-y plane.
pub fn face_size(mesh: &FaceMesh) -> Result<f64> {
    let (lo, hi) = mesh.bounding_box();
    let width = hi.x - lo.x;
    let length = hi.y - lo.y;
    if !(width > 0.0 && length > 0.0) {
        return Err(Error::Invalid(format!(
            "reference face has degenerate extent (width {width}, length {length})"
        )));
    }
    Ok((width * length).sqrt())
}

/// Mean landmark distance over the reference face size.
pub fn nme(pred: &FaceMesh, reference: &FaceMesh, spec: &LandmarkSpec) -> Result<f64> {
    spec.validate(pred.n_vertices())?;
    spec.validate(reference.n_vertices())?;
    let size = face_size(reference)?;
    let lm = spec.landmarks();
    let total: f64 = lm
        .iter()
        .map(|&i| (pred.vertices[i] - reference.vertices[i]).norm())
        .sum();
    Ok(total / lm.len() as f64 / size)
}

pub fn holistic_registration(pred: &FaceMesh, reference: &FaceMesh, cfg: &IcpConfig) -> Result<IcpResult> {
    icp(pred, reference, cfg)
}

pub fn holistic_rmse(pred: &FaceMesh, reference: &FaceMesh, cfg: &IcpConfig) -> Result<f64> {
    Ok(holistic_registration(pred, reference, cfg)?.rmse)
}

/// ICP restricted to one region's vertices. Reference normals are those of
/// the full reference mesh, i.e. built from every triangle incident to the
/// region.
pub fn region_registration(
    pred: &FaceMesh,
    reference: &FaceMesh,
    ref_normals: &[Vector3<f64>],
    members: &[usize],
    region: Region,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    if members.len() < MIN_REGION_VERTICES {
        return Err(Error::Invalid(format!(
            "region '{region}' has {} vertices; a rigid solve needs at least {MIN_REGION_VERTICES}",
            members.len()
        )));
    }
    let src: Vec<_> = members.iter().map(|&i| pred.vertices[i]).collect();
    let dst: Vec<_> = members.iter().map(|&i| reference.vertices[i]).collect();
    let nrm: Vec<_> = members.iter().map(|&i| ref_normals[i]).collect();
    icp_points(&src, &dst, &nrm, cfg)
}

pub type PartRmse = BTreeMap<Region, f64>;

pub fn part_rmse(pred: &FaceMesh, reference: &FaceMesh, spec: &LandmarkSpec, cfg: &IcpConfig) -> Result<PartRmse> {
    spec.validate(pred.n_vertices())?;
    spec.validate(reference.n_vertices())?;
    let normals = reference.vertex_normals()?;
    Region::ALL
        .into_iter()
        .map(|r| {
            let out = region_registration(pred, reference, &normals, spec.region(r), r, cfg)?;
            Ok((r, out.rmse))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub pred: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub are: AreBlock,
    pub nme: f64,
    pub holistic_rmse: f64,
    pub part_rmse: PartRmse,
    pub provenance: Provenance,
}

pub const MEAN_TOLERANCE: f64 = 1e-12;

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let a = &self.are;
        let values = [a.er, a.fr, a.mr, a.cr, a.mean, self.nme, self.holistic_rmse]
            .into_iter()
            .chain(self.part_rmse.values().copied());
        for v in values {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Invalid(format!("metric value {v} is not a finite nonnegative number")));
            }
        }
        let mean = (a.er + a.fr + a.mr + a.cr) / 4.0;
        if (mean - a.mean).abs() > MEAN_TOLERANCE {
            return Err(Error::Invalid(format!(
                "are.mean {} differs from the mean of its components {mean}",
                a.mean
            )));
        }
        for r in Region::ALL {
            if !self.part_rmse.contains_key(&r) {
                return Err(Error::MissingKey(r.name().into()));
            }
        }
        Ok(())
    }
}

/// Full report. Holistic ICP runs first; when `cfg` has no seed transform
/// the part registrations start from the holistic alignment.
pub fn evaluate(
    pred: &FaceMesh,
    reference: &FaceMesh,
    spec: &LandmarkSpec,
    cfg: &IcpConfig,
    provenance: Provenance,
) -> Result<MetricsReport> {
    if pred.n_vertices() != reference.n_vertices() {
        return Err(Error::dim("predicted mesh vertices", reference.n_vertices(), pred.n_vertices()));
    }
    let are = are(pred, reference, spec)?;
    let nme = nme(pred, reference, spec)?;
    let holistic = holistic_registration(pred, reference, cfg)?;
    let part_cfg = IcpConfig {
        seed_transform: Some(cfg.seed_transform.unwrap_or(holistic.transform)),
        ..*cfg
    };
    let part_rmse = part_rmse(pred, reference, spec, &part_cfg)?;
    let report = MetricsReport {
        are,
        nme,
        holistic_rmse: holistic.rmse,
        part_rmse,
        provenance,
    };
    report.validate()?;
    Ok(report)
}

/// Convenience for callers holding a known alignment.
pub fn seeded(cfg: &IcpConfig, xf: RigidTransform) -> IcpConfig {
    IcpConfig {
        seed_transform: Some(xf),
        ..*cfg
    }
}
