//! Synthetic multiscale bar dataset: a large-scale bend about the middle of an
//! open tube plus a small Gaussian bump on the fixed half.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, MeshError};
use crate::mesh::{TriangleMesh, Vec3};
use crate::obj::save_obj;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BarSpec {
    /// Segments along the length; the tube has `segments + 1` rings.
    pub segments: usize,
    pub ring_vertices: usize,
    pub length: f64,
    pub radius: f64,
    pub max_bend_deg: f64,
    pub max_bump: f64,
    /// Arc length of the bent section, centered on the middle of the bar.
    pub bend_length: f64,
    pub bump_sigma: f64,
    /// Distance of the bump center from the fixed end, along the axis.
    pub bump_position: f64,
    /// Grid resolution of the bend angle and bump amplitude parameters.
    pub angle_levels: usize,
    pub bump_levels: usize,
    /// Per-shape parameter jitter as a fraction of one grid cell.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for BarSpec {
    fn default() -> Self {
        Self {
            segments: 24,
            ring_vertices: 12,
            length: 4.0,
            radius: 0.3,
            max_bend_deg: 120.0,
            max_bump: 0.15,
            bend_length: 1.0,
            bump_sigma: 0.15,
            bump_position: 1.0,
            angle_levels: 10,
            bump_levels: 5,
            jitter: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarParams {
    pub bend_deg: f64,
    pub bump: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub index: usize,
    pub name: String,
    pub bend_deg: f64,
    pub bump: f64,
}

/// Generated shapes with their parameters and ground-truth regions.
#[derive(Debug, Clone)]
pub struct BarDataset {
    pub meshes: Vec<TriangleMesh>,
    pub params: Vec<ShapeRecord>,
    pub bump_center: usize,
    /// Vertices moved by any nonzero bend.
    pub bend_region: Vec<usize>,
    /// Vertices within three standard deviations of the bump center.
    pub bump_support: Vec<usize>,
}

impl BarSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.ring_vertices < 3 {
            return bad("ring_vertices must be at least 3");
        }
        if self.segments < 2 {
            return bad("segments must be at least 2");
        }
        let positive = [self.length, self.radius, self.bend_length, self.bump_sigma];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("length, radius, bend_length and bump_sigma must be positive");
        }
        if self.bend_length > self.length {
            return bad("bend_length exceeds length");
        }
        if !(self.max_bend_deg >= 0.0 && self.max_bump >= 0.0) {
            return bad("parameter ranges must be non-negative");
        }
        if self.angle_levels < 1 || self.bump_levels < 1 {
            return bad("grid levels must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return bad("jitter must lie in [0, 1]");
        }
        if !(0.0..=self.length).contains(&self.bump_position) {
            return bad("bump_position outside the bar");
        }
        Ok(())
    }

    pub fn ring_count(&self) -> usize {
        self.segments + 1
    }

    pub fn vertex_count(&self) -> usize {
        self.ring_count() * self.ring_vertices
    }

    /// Axial coordinate and ring angle of each vertex. Odd rings are rotated
    /// by half a step so every triangle is acute.
    fn rest_coordinates(&self) -> Vec<(f64, f64)> {
        let n = self.ring_vertices;
        let mut out = Vec::with_capacity(self.vertex_count());
        for ring in 0..self.ring_count() {
            let s = self.length * ring as f64 / self.segments as f64;
            let offset = if ring % 2 == 1 { 0.5 } else { 0.0 };
            for j in 0..n {
                out.push((s, TAU * (j as f64 + offset) / n as f64));
            }
        }
        out
    }

    pub fn faces(&self) -> Vec<[usize; 3]> {
        let n = self.ring_vertices;
        let mut faces = Vec::with_capacity(2 * n * self.segments);
        for ring in 0..self.segments {
            let a = |j: usize| ring * n + j % n;
            let b = |j: usize| (ring + 1) * n + j % n;
            for j in 0..n {
                if ring % 2 == 0 {
                    faces.push([a(j), a(j + 1), b(j)]);
                    faces.push([b(j), a(j + 1), b(j + 1)]);
                } else {
                    faces.push([a(j), a(j + 1), b(j + 1)]);
                    faces.push([a(j), b(j + 1), b(j)]);
                }
            }
        }
        faces
    }

    /// Vertex closest to the `+z` side at the bump position.
    pub fn bump_center(&self) -> usize {
        let rest = self.rest_coordinates();
        let target = Vec3::new(self.bump_position, 0.0, self.radius);
        (0..rest.len())
            .min_by(|&a, &b| {
                let da = (self.rest_position(rest[a]) - target).norm();
                let db = (self.rest_position(rest[b]) - target).norm();
                da.total_cmp(&db)
            })
            .expect("non-empty bar")
    }

    fn rest_position(&self, (s, phi): (f64, f64)) -> Vec3 {
        Vec3::new(s, self.radius * phi.cos(), self.radius * phi.sin())
    }

    fn bend_start(&self) -> f64 {
        0.5 * (self.length - self.bend_length)
    }

    pub fn bend_region(&self) -> Vec<usize> {
        let start = self.bend_start();
        self.rest_coordinates().iter().enumerate().filter(|(_, (s, _))| *s > start).map(|(i, _)| i).collect()
    }

    pub fn bump_support(&self) -> Vec<usize> {
        let rest = self.rest_coordinates();
        let center = self.rest_position(rest[self.bump_center()]);
        rest.iter()
            .enumerate()
            .filter(|(_, c)| (self.rest_position(**c) - center).norm() <= 3.0 * self.bump_sigma)
            .map(|(i, _)| i)
            .collect()
    }

    /// The bar bent by `bend_deg` toward `+y` with a radial bump of height `bump`.
    pub fn shape(&self, params: BarParams) -> TriangleMesh {
        let rest = self.rest_coordinates();
        let center = self.rest_position(rest[self.bump_center()]);
        let cutoff = 3.0 * self.bump_sigma;
        let angle = params.bend_deg.to_radians();
        let kappa = angle / self.bend_length;
        let start = self.bend_start();
        let positions = rest
            .iter()
            .map(|&(s, phi)| {
                let p0 = self.rest_position((s, phi));
                let dist = (p0 - center).norm();
                let r = if dist <= cutoff && params.bump != 0.0 {
                    self.radius + params.bump * (-0.5 * (dist / self.bump_sigma).powi(2)).exp()
                } else {
                    self.radius
                };
                let (y, z) = (r * phi.cos(), r * phi.sin());
                if s <= start || angle == 0.0 {
                    return Vec3::new(s, y, z);
                }
                let u = (s - start).min(self.bend_length);
                let t = kappa * u;
                let spine = Vec3::new(start + t.sin() / kappa, (1.0 - t.cos()) / kappa, 0.0);
                let tangent = Vec3::new(t.cos(), t.sin(), 0.0);
                let normal = Vec3::new(-t.sin(), t.cos(), 0.0);
                spine + tangent * (s - start - u) + normal * y + Vec3::z() * z
            })
            .collect();
        TriangleMesh::new(positions, self.faces())
    }

    /// Grid cell `(angle level, bump level)` of shape `m`. Shapes at multiples
    /// of `angle_levels` take the corners and the center of the grid, so an
    /// every-tenth training subset spans the parameter box; the other cells
    /// follow in row-major order. Indices past the grid wrap around.
    pub fn cell(&self, m: usize) -> (usize, usize) {
        let (na, nb) = (self.angle_levels, self.bump_levels);
        let total = na * nb;
        let spread_count = total.div_ceil(na);
        let mut spread: Vec<(usize, usize)> = Vec::with_capacity(spread_count);
        let preferred = [(0, 0), (0, nb - 1), (na - 1, 0), (na - 1, nb - 1), (na / 2, nb / 2)];
        for c in preferred.into_iter().chain((0..total).map(|i| (i / nb, i % nb))) {
            if spread.len() == spread_count {
                break;
            }
            if !spread.contains(&c) {
                spread.push(c);
            }
        }
        let m = m % total;
        if m % na == 0 {
            return spread[m / na];
        }
        let rank = m - m / na - 1;
        (0..total).map(|i| (i / nb, i % nb)).filter(|c| !spread.contains(c)).nth(rank).expect("cell rank in range")
    }

    /// Parameters of shape `m`. Shape 0 is the undeformed bar; see [`Self::cell`].
    pub fn params(&self, m: usize) -> BarParams {
        if m == 0 {
            return BarParams { bend_deg: 0.0, bump: 0.0 };
        }
        let (na, nb) = (self.angle_levels, self.bump_levels);
        let (ai, bi) = self.cell(m);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(m as u64));
        let mut level = |index: usize, levels: usize| {
            if levels == 1 {
                return 1.0;
            }
            let jitter = self.jitter * rng.random_range(-0.5..0.5);
            ((index as f64 + jitter) / (levels - 1) as f64).clamp(0.0, 1.0)
        };
        let a = level(ai, na);
        let b = level(bi, nb);
        BarParams { bend_deg: self.max_bend_deg * a, bump: self.max_bump * b }
    }
}

/// `n` shapes of the bar family; shape 0 is the reference.
pub fn gen_bar_dataset(spec: &BarSpec, n: usize) -> Result<BarDataset, ConfigError> {
    spec.validate()?;
    if n < 2 {
        return Err(ConfigError::Invalid(format!("need at least 2 shapes, got {n}")));
    }
    let mut meshes = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    for m in 0..n {
        let p = spec.params(m);
        let name = format!("bar_{m:03}");
        meshes.push(spec.shape(p).with_name(name.clone()));
        params.push(ShapeRecord { index: m, name, bend_deg: p.bend_deg, bump: p.bump });
    }
    Ok(BarDataset {
        meshes,
        params,
        bump_center: spec.bump_center(),
        bend_region: spec.bend_region(),
        bump_support: spec.bump_support(),
    })
}

#[derive(Serialize)]
struct ParamTable<'a> {
    spec: &'a BarSpec,
    bump_center: usize,
    bend_region: &'a [usize],
    bump_support: &'a [usize],
    shapes: &'a [ShapeRecord],
}

/// Writes `<name>.obj` per shape and `params.json` into `dir`.
pub fn write_dataset(dir: &Path, spec: &BarSpec, data: &BarDataset) -> Result<(), MeshError> {
    std::fs::create_dir_all(dir).map_err(|source| MeshError::Io { path: dir.to_path_buf(), source })?;
    for mesh in &data.meshes {
        save_obj(mesh, dir.join(format!("{}.obj", mesh.name)))?;
    }
    let table = ParamTable {
        spec,
        bump_center: data.bump_center,
        bend_region: &data.bend_region,
        bump_support: &data.bump_support,
        shapes: &data.params,
    };
    let path = dir.join("params.json");
    let text = serde_json::to_string_pretty(&table).expect("plain data serializes");
    std::fs::write(&path, text).map_err(|source| MeshError::Io { path, source })
}

/// Angle in degrees between two direction vectors.
pub fn angle_between_deg(a: Vec3, b: Vec3) -> f64 {
    let c = (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0);
    c.acos() * 180.0 / PI
}
