//! ASCII Wavefront OBJ reading and writing (`v` and triangular `f` records).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::MeshError;
use crate::mesh::{TriangleMesh, Vec3};

/// Digits written after the decimal point for every coordinate.
pub const POSITION_DECIMALS: usize = 9;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MeshError + '_ {
    move |source| MeshError::Io { path: path.to_path_buf(), source }
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<TriangleMesh, MeshError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(parse_obj(&text)?.with_name(name))
}

fn parse_index(token: &str, vertex_count: usize, line: usize) -> Result<usize, MeshError> {
    let head = token.split('/').next().unwrap_or("");
    let raw: i64 = head.parse().map_err(|_| MeshError::Parse { line, message: format!("bad face index {token:?}") })?;
    let index = match raw {
        0 => return Err(MeshError::Parse { line, message: "face index 0 is invalid in OBJ".into() }),
        r if r > 0 => (r - 1) as usize,
        // negative indices count back from the most recent vertex
        r => {
            let back = r.unsigned_abs() as usize;
            if back > vertex_count {
                return Err(MeshError::IndexOutOfRange { index: vertex_count, vertex_count, line: Some(line) });
            }
            vertex_count - back
        }
    };
    Ok(index)
}

pub fn parse_obj(text: &str) -> Result<TriangleMesh, MeshError> {
    let mut positions = Vec::new();
    let mut faces: Vec<([usize; 3], usize)> = Vec::new();
    for (n, raw_line) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        let mut tokens = content.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| MeshError::Parse { line, message: format!("bad vertex coordinate: {e}") })?;
                if coords.len() != 3 {
                    return Err(MeshError::Parse { line, message: "vertex needs three coordinates".into() });
                }
                positions.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<usize> =
                    tokens.map(|t| parse_index(t, positions.len(), line)).collect::<Result<_, _>>()?;
                if idx.len() != 3 {
                    return Err(MeshError::NonTriangularFace { line, count: idx.len() });
                }
                faces.push(([idx[0], idx[1], idx[2]], line));
            }
            _ => {}
        }
    }
    if positions.is_empty() {
        return Err(MeshError::EmptyMesh);
    }
    let v = positions.len();
    for (tri, line) in &faces {
        if let Some(&index) = tri.iter().find(|&&i| i >= v) {
            return Err(MeshError::IndexOutOfRange { index, vertex_count: v, line: Some(*line) });
        }
    }
    let mesh = TriangleMesh::new(positions, faces.into_iter().map(|(t, _)| t).collect());
    mesh.validate()?;
    Ok(mesh)
}

/// Renders `mesh` as OBJ text. Fails on an empty mesh or non-finite positions.
pub fn to_obj_string(mesh: &TriangleMesh) -> Result<String, MeshError> {
    mesh.validate()?;
    let mut out = String::with_capacity(mesh.vertex_count() * 48 + mesh.face_count() * 24);
    if !mesh.name.is_empty() {
        let _ = writeln!(out, "# {}", mesh.name);
    }
    for p in &mesh.positions {
        let _ = writeln!(out, "v {:.prec$} {:.prec$} {:.prec$}", p.x, p.y, p.z, prec = POSITION_DECIMALS);
    }
    for t in &mesh.faces {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    Ok(out)
}

pub fn save_obj(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let path = path.as_ref();
    let text = to_obj_string(mesh)?;
    fs::write(path, text).map_err(io_err(path))
}
