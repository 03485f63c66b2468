//! Mesh editing through the component latents: sparse slider weights to a
//! mesh, and a regularized fit of all latents to control-point targets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acap::{AcapEncoder, AcapFeature, ReconstructionSystem, MU};
use crate::error::EditError;
use crate::mesh::{TriangleMesh, Vec3};
use crate::network::Graph;
use crate::stacked::{Component, StackedParams};

/// Vertex pinned to its reference position in every reconstruction.
pub const EDIT_ANCHOR: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlConstraint {
    pub vertex: usize,
    pub target: [f64; 3],
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

/// One slider value: latent `index` of block `ae` at `level` (1 or 2; the
/// level-1 block is always `ae = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentWeight {
    pub level: u8,
    pub ae: usize,
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub rho: f64,
    pub step: f64,
    pub max_iterations: usize,
    pub rel_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { rho: 1e-3, step: 1e-4, max_iterations: 200, rel_tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditSolution {
    pub z0: Vec<f64>,
    pub z_k: Vec<Vec<f64>>,
    pub mesh: TriangleMesh,
    /// RMS distance between constrained vertices and their targets.
    pub residual: f64,
    pub objective: f64,
    /// Objective at the start and after every accepted step.
    pub history: Vec<f64>,
    pub iterations: usize,
    /// Indices of constraints on the anchor vertex, which cannot move.
    pub skipped: Vec<usize>,
    /// True when the last Jacobian or objective was non-finite and the fit
    /// stopped at the last finite iterate.
    pub aborted: bool,
}

impl EditSolution {
    /// Nonzero latents as slider weights.
    pub fn weights(&self) -> Vec<LatentWeight> {
        let mut out: Vec<LatentWeight> =
            self.z0.iter().enumerate().map(|(index, &value)| LatentWeight { level: 1, ae: 0, index, value }).collect();
        for (ae, z) in self.z_k.iter().enumerate() {
            out.extend(z.iter().enumerate().map(|(index, &value)| LatentWeight { level: 2, ae, index, value }));
        }
        out.retain(|w| w.value != 0.0);
        out
    }
}

/// Decoding and reconstruction state for one model. Reuses the position
/// solver's factorization and each block's zero-latent decode.
pub struct Editor<'a> {
    model: &'a StackedParams,
    graph: Graph,
    system: ReconstructionSystem,
    zero_decodes: Vec<Vec<f64>>,
}

impl<'a> Editor<'a> {
    pub fn new(model: &'a StackedParams) -> Result<Self, EditError> {
        let graph = model.graph();
        let system = AcapEncoder::new(&model.reference)?.reconstruction_system(EDIT_ANCHOR)?;
        let zero_decodes = model.blocks().map(|ae| ae.decode(&vec![0.0; ae.kz], &graph)).collect();
        Ok(Self { model, graph, system, zero_decodes })
    }

    pub fn model(&self) -> &StackedParams {
        self.model
    }

    fn block_count(&self) -> usize {
        1 + self.model.second.len()
    }

    fn block_of(&self, level: u8, ae: usize, index: usize) -> Result<usize, EditError> {
        let bad = EditError::BadIndex { level, ae, index };
        let b = match (level, ae) {
            (1, 0) => 0,
            (2, a) if a < self.model.second.len() => a + 1,
            _ => return Err(bad),
        };
        let kz = if b == 0 { self.model.ae0.kz } else { self.model.second[b - 1].kz };
        if index >= kz {
            return Err(bad);
        }
        Ok(b)
    }

    /// Full latent vectors (block 0 first) from sparse weights; repeated
    /// keys keep the last value.
    pub fn latents(&self, weights: &[LatentWeight]) -> Result<Vec<Vec<f64>>, EditError> {
        let mut z: Vec<Vec<f64>> = self.model.blocks().map(|ae| vec![0.0; ae.kz]).collect();
        for w in weights {
            let b = self.block_of(w.level, w.ae, w.index)?;
            if !w.value.is_finite() {
                return Err(EditError::NonFiniteWeight { level: w.level, ae: w.ae, index: w.index });
            }
            z[b][w.index] = w.value;
        }
        Ok(z)
    }

    fn block_delta(&self, b: usize, z: &[f64]) -> Vec<f64> {
        let ae = if b == 0 { &self.model.ae0 } else { &self.model.second[b - 1] };
        if z.iter().all(|&v| v == 0.0) {
            return vec![0.0; ae.width()];
        }
        ae.decode(z, &self.graph).iter().zip(&self.zero_decodes[b]).map(|(a, c)| a - c).collect()
    }

    fn feature_from_deltas(deltas: &[Vec<f64>], v: usize) -> AcapFeature {
        let mut flat = vec![0.0; v * MU];
        for d in deltas {
            for (f, x) in flat.iter_mut().zip(d) {
                *f += x;
            }
        }
        AcapFeature::new(flat.chunks_exact(MU).map(|r| r.try_into().expect("MU chunk")).collect())
    }

    /// Scaled feature: the sum over blocks of `dec(z) - dec(0)`.
    pub fn feature(&self, z: &[Vec<f64>]) -> AcapFeature {
        let deltas: Vec<Vec<f64>> = (0..self.block_count()).map(|b| self.block_delta(b, &z[b])).collect();
        Self::feature_from_deltas(&deltas, self.model.vertex_count())
    }

    pub fn mesh_from_feature(&self, feature: &AcapFeature) -> Result<TriangleMesh, EditError> {
        let mut mesh = self.system.reconstruct(feature, &self.model.scaler)?;
        mesh.name = self.model.reference.name.clone();
        Ok(mesh)
    }

    pub fn decode_latents(&self, z: &[Vec<f64>]) -> Result<TriangleMesh, EditError> {
        self.mesh_from_feature(&self.feature(z))
    }

    pub fn apply(&self, weights: &[LatentWeight]) -> Result<TriangleMesh, EditError> {
        self.decode_latents(&self.latents(weights)?)
    }

    fn check_constraints(&self, constraints: &[ControlConstraint]) -> Result<Vec<usize>, EditError> {
        let v = self.model.vertex_count();
        let mut skipped = Vec::new();
        for (index, c) in constraints.iter().enumerate() {
            let fail = |message: String| Err(EditError::BadConstraint { index, message });
            if c.vertex >= v {
                return fail(format!("vertex {} out of range for {v} vertices", c.vertex));
            }
            if c.target.iter().any(|t| !t.is_finite()) {
                return fail("target is not finite".into());
            }
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return fail(format!("weight {} must be positive", c.weight));
            }
            if c.vertex == EDIT_ANCHOR {
                skipped.push(index);
            }
        }
        if skipped.len() == constraints.len() {
            return Err(EditError::NoConstraints);
        }
        Ok(skipped)
    }

    /// Levenberg-Marquardt on `sum w |P_v - target|^2 + rho |z|^2` with a
    /// forward-difference Jacobian through decode and reconstruction. Steps
    /// are accepted only when they lower the objective.
    pub fn fit(&self, constraints: &[ControlConstraint], opts: &FitOptions) -> Result<EditSolution, EditError> {
        let skipped = self.check_constraints(constraints)?;
        let active: Vec<&ControlConstraint> =
            constraints.iter().enumerate().filter(|(i, _)| !skipped.contains(i)).map(|(_, c)| c).collect();
        let sizes: Vec<usize> = self.model.blocks().map(|ae| ae.kz).collect();
        let n: usize = sizes.iter().sum();
        let locate: Vec<(usize, usize)> =
            sizes.iter().enumerate().flat_map(|(b, &k)| (0..k).map(move |i| (b, i))).collect();
        let split = |flat: &[f64]| -> Vec<Vec<f64>> {
            let mut out = Vec::with_capacity(sizes.len());
            let mut at = 0;
            for &k in &sizes {
                out.push(flat[at..at + k].to_vec());
                at += k;
            }
            out
        };
        let sqrt_rho = opts.rho.sqrt();
        // residual vector: 3 entries per active constraint, then sqrt(rho) z
        let residuals = |mesh: &TriangleMesh, z: &[f64]| -> Vec<f64> {
            let mut r = Vec::with_capacity(3 * active.len() + n);
            for c in &active {
                let d = mesh.positions[c.vertex] - Vec3::from(c.target);
                let s = c.weight.sqrt();
                r.extend([s * d.x, s * d.y, s * d.z]);
            }
            r.extend(z.iter().map(|x| sqrt_rho * x));
            r
        };
        let sq = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();

        let mut z = vec![0.0; n];
        let mut deltas: Vec<Vec<f64>> = split(&z).iter().enumerate().map(|(b, zb)| self.block_delta(b, zb)).collect();
        let v = self.model.vertex_count();
        let mut mesh = self.mesh_from_feature(&Self::feature_from_deltas(&deltas, v))?;
        let mut r = residuals(&mesh, &z);
        let mut f = sq(&r);
        if !f.is_finite() {
            return Err(EditError::NonFiniteStart);
        }
        let mut history = vec![f];
        let mut lambda = 1e-3;
        let mut iterations = 0;
        let mut aborted = false;
        let m = r.len();
        while iterations < opts.max_iterations && f > 0.0 {
            iterations += 1;
            // forward-difference Jacobian, one latent at a time
            let mut jac = vec![0.0; m * n];
            let mut finite = true;
            let blocks = split(&z);
            for (col, &(b, i)) in locate.iter().enumerate() {
                let mut zb = blocks[b].clone();
                zb[i] += opts.step;
                let mut trial = deltas.clone();
                trial[b] = self.block_delta(b, &zb);
                let mut zt = z.clone();
                zt[col] += opts.step;
                let rt = residuals(&self.mesh_from_feature(&Self::feature_from_deltas(&trial, v))?, &zt);
                for row in 0..m {
                    let d = (rt[row] - r[row]) / opts.step;
                    finite &= d.is_finite();
                    jac[row * n + col] = d;
                }
            }
            if !finite {
                aborted = true;
                break;
            }
            let mut jtj = nalgebra::DMatrix::<f64>::zeros(n, n);
            let mut jtr = nalgebra::DVector::<f64>::zeros(n);
            for row in 0..m {
                let jr = &jac[row * n..(row + 1) * n];
                for a in 0..n {
                    jtr[a] += jr[a] * r[row];
                    for c in a..n {
                        jtj[(a, c)] += jr[a] * jr[c];
                    }
                }
            }
            for a in 0..n {
                for c in 0..a {
                    jtj[(a, c)] = jtj[(c, a)];
                }
            }
            let mut accepted = false;
            let mut converged = false;
            while lambda < 1e12 {
                let mut lhs = jtj.clone();
                for a in 0..n {
                    lhs[(a, a)] += lambda * (1.0 + jtj[(a, a)]);
                }
                let Some(step) = lhs.cholesky().map(|ch| ch.solve(&(-&jtr))) else {
                    lambda *= 10.0;
                    continue;
                };
                let zt: Vec<f64> = z.iter().zip(step.iter()).map(|(a, s)| a + s).collect();
                let td: Vec<Vec<f64>> = split(&zt).iter().enumerate().map(|(b, zb)| self.block_delta(b, zb)).collect();
                let trial_mesh = self.mesh_from_feature(&Self::feature_from_deltas(&td, v))?;
                let rt = residuals(&trial_mesh, &zt);
                let ft = sq(&rt);
                if ft.is_finite() && ft < f {
                    let improvement = (f - ft) / f;
                    z = zt;
                    deltas = td;
                    mesh = trial_mesh;
                    r = rt;
                    f = ft;
                    history.push(f);
                    lambda = (lambda * 0.3).max(1e-12);
                    accepted = true;
                    converged = improvement < opts.rel_tolerance;
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted || converged {
                break;
            }
        }
        let residual =
            (active.iter().map(|c| (mesh.positions[c.vertex] - Vec3::from(c.target)).norm_squared()).sum::<f64>()
                / active.len() as f64)
                .sqrt();
        let mut blocks = split(&z);
        let z0 = blocks.remove(0);
        Ok(EditSolution { z0, z_k: blocks, mesh, residual, objective: f, history, iterations, skipped, aborted })
    }
}

/// The slider setting that renders `component`: its latent at the probe magnitude.
pub fn probe_weight(component: &Component) -> LatentWeight {
    LatentWeight { level: component.level, ae: component.ae, index: component.index, value: component.magnitude }
}

/// Mesh for sparse slider weights. See [`Editor::apply`].
pub fn apply_weights(model: &StackedParams, weights: &[LatentWeight]) -> Result<TriangleMesh, EditError> {
    Editor::new(model)?.apply(weights)
}

/// Latents fitted to control-point targets. See [`Editor::fit`].
pub fn fit_latents(
    model: &StackedParams,
    constraints: &[ControlConstraint],
    opts: &FitOptions,
) -> Result<EditSolution, EditError> {
    Editor::new(model)?.fit(constraints, opts)
}

pub fn read_constraints(path: &Path) -> Result<Vec<ControlConstraint>, EditError> {
    let file = |message: String| EditError::File { path: path.to_path_buf(), message };
    let text = std::fs::read_to_string(path).map_err(|e| file(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| file(e.to_string()))
}

pub fn write_constraints(path: &Path, constraints: &[ControlConstraint]) -> Result<(), EditError> {
    let text = serde_json::to_string_pretty(constraints).expect("constraints serialize");
    std::fs::write(path, text).map_err(|e| EditError::File { path: path.to_path_buf(), message: e.to_string() })
}

/// Per-vertex distance between two meshes with the same vertex count.
pub fn displacement_magnitudes(a: &TriangleMesh, b: &TriangleMesh) -> Vec<f64> {
    a.positions.iter().zip(&b.positions).map(|(p, q)| (p - q).norm()).collect()
}
