use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::model::{FaceMesh, Triangle};

/// Vertices as `v x y z` with 9 significant digits, faces 1-based.
pub fn write_obj(mesh: &FaceMesh) -> String {
    let mut out = String::with_capacity(40 * mesh.vertices.len() + 20 * mesh.triangles.len());
    for v in &mesh.vertices {
        writeln!(out, "v {:.8e} {:.8e} {:.8e}", v.x, v.y, v.z).unwrap();
    }
    for t in mesh.triangles.iter() {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
    }
    out
}

pub fn export_obj(mesh: &FaceMesh, path: &Path) -> Result<()> {
    std::fs::write(path, write_obj(mesh)).map_err(Error::at(path))
}

pub fn import_obj(path: &Path) -> Result<FaceMesh> {
    let text = std::fs::read_to_string(path).map_err(Error::at(path))?;
    parse_obj(&text, &path.display().to_string())
}

/// Reads `v` and `f` records. Faces with more than three corners are fan
/// triangulated; `i/j/k` corner syntax keeps the position index; negative
/// indices count back from the latest vertex. Other records are skipped.
pub fn parse_obj(text: &str, source: &str) -> Result<FaceMesh> {
    let err = |line: usize, msg: String| Error::Parse {
        path: source.into(),
        line,
        msg,
    };
    let mut vertices = Vec::new();
    let mut triangles: Vec<Triangle> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<&str> = tokens.collect();
                if !(3..=4).contains(&coords.len()) {
                    return Err(err(line_no, format!("vertex needs 3 coordinates, found {}", coords.len())));
                }
                let mut xyz = [0.0; 3];
                for (slot, tok) in xyz.iter_mut().zip(&coords) {
                    *slot = tok
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err(line_no, format!("bad coordinate '{tok}'")))?;
                }
                vertices.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let mut corners = Vec::new();
                for tok in tokens {
                    let idx_text = tok.split('/').next().unwrap_or("");
                    let idx: i64 = idx_text
                        .parse()
                        .map_err(|_| err(line_no, format!("bad face index '{tok}'")))?;
                    let resolved = match idx {
                        0 => return Err(err(line_no, "face index 0 is invalid (indices are 1-based)".into())),
                        i if i > 0 => i - 1,
                        i => vertices.len() as i64 + i,
                    };
                    if resolved < 0 || resolved >= vertices.len() as i64 {
                        return Err(err(
                            line_no,
                            format!("face index {idx} out of range ({} vertices so far)", vertices.len()),
                        ));
                    }
                    corners.push(resolved as u32);
                }
                if corners.len() < 3 {
                    return Err(err(line_no, format!("face needs 3 corners, found {}", corners.len())));
                }
                for w in 1..corners.len() - 1 {
                    triangles.push([corners[0], corners[w], corners[w + 1]]);
                }
            }
            _ => {}
        }
    }
    FaceMesh::new(vertices, triangles)
}
