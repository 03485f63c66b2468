//! Reconstruction error measures: vertex RMS on unit-ball normalized meshes,
//! a simplified spatio-temporal edge difference, and the worst-case feature
//! percentage error.

use serde::{Deserialize, Serialize};

use crate::acap::AcapFeature;
use crate::error::MetricsError;
use crate::mesh::{TriangleMesh, Vec3};

/// Vertex RMS values are reported multiplied by this factor.
pub const E_RMS_SCALE: f64 = 1e3;

/// Translation and uniform scale that map a mesh into the unit ball.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitBall {
    pub center: Vec3,
    pub scale: f64,
}

impl UnitBall {
    /// Centroid to origin, farthest vertex to radius one.
    pub fn of(mesh: &TriangleMesh) -> Self {
        let center = mesh.centroid();
        let radius = mesh.positions.iter().map(|p| (p - center).norm()).fold(0.0, f64::max);
        Self { center, scale: if radius > 0.0 { 1.0 / radius } else { 1.0 } }
    }

    pub fn apply(&self, mesh: &TriangleMesh) -> TriangleMesh {
        TriangleMesh {
            positions: mesh.positions.iter().map(|p| (p - self.center) * self.scale).collect(),
            faces: mesh.faces.clone(),
            name: mesh.name.clone(),
        }
    }
}

/// Normalizes each ground/reconstruction pair with the ground's transform,
/// so reconstruction offsets survive normalization.
pub fn normalize_pairs(ground: &[TriangleMesh], recon: &[TriangleMesh]) -> (Vec<TriangleMesh>, Vec<TriangleMesh>) {
    ground
        .iter()
        .zip(recon)
        .map(|(g, r)| {
            let t = UnitBall::of(g);
            (t.apply(g), t.apply(r))
        })
        .unzip()
}

fn check_pairs(ground: &[TriangleMesh], recon: &[TriangleMesh]) -> Result<(), MetricsError> {
    if ground.len() != recon.len() {
        return Err(MetricsError::CountMismatch { ground: ground.len(), recon: recon.len() });
    }
    if ground.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (index, (g, r)) in ground.iter().zip(recon).enumerate() {
        if !g.shares_connectivity(r) || !g.shares_connectivity(&ground[0]) {
            return Err(MetricsError::Connectivity { index });
        }
    }
    Ok(())
}

fn squared_distance_sum(g: &TriangleMesh, r: &TriangleMesh) -> f64 {
    g.positions.iter().zip(&r.positions).map(|(a, b)| (a - b).norm_squared()).sum()
}

/// Pooled vertex RMS over all shapes, times [`E_RMS_SCALE`]. Inputs are
/// expected to be normalized already (see [`normalize_pairs`]).
pub fn e_rms(ground: &[TriangleMesh], recon: &[TriangleMesh]) -> Result<f64, MetricsError> {
    check_pairs(ground, recon)?;
    let total: f64 = ground.iter().zip(recon).map(|(g, r)| squared_distance_sum(g, r)).sum();
    let count = ground.len() * ground[0].vertex_count();
    Ok((total / count as f64).sqrt() * E_RMS_SCALE)
}

/// Per-shape vertex RMS, times [`E_RMS_SCALE`].
pub fn e_rms_per_shape(ground: &[TriangleMesh], recon: &[TriangleMesh]) -> Result<Vec<f64>, MetricsError> {
    check_pairs(ground, recon)?;
    Ok(ground
        .iter()
        .zip(recon)
        .map(|(g, r)| (squared_distance_sum(g, r) / g.vertex_count() as f64).sqrt() * E_RMS_SCALE)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StedParts {
    pub spatial: f64,
    pub temporal: f64,
}

impl StedParts {
    pub fn total(&self) -> f64 {
        self.spatial + self.temporal
    }
}

/// Spatial term: RMS relative edge-length error over all shapes and edges.
/// Temporal term: RMS norm of the difference between reconstructed and
/// ground displacements of each vertex between consecutive frames (zero for
/// single-frame sequences).
pub fn sted_parts(ground: &[TriangleMesh], recon: &[TriangleMesh]) -> Result<StedParts, MetricsError> {
    check_pairs(ground, recon)?;
    let edges = ground[0].edges();
    let mut spatial = 0.0;
    for (index, (g, r)) in ground.iter().zip(recon).enumerate() {
        for &(a, b) in &edges {
            let lg = (g.positions[a] - g.positions[b]).norm();
            if lg == 0.0 {
                return Err(MetricsError::ZeroEdge { index, a, b });
            }
            let lr = (r.positions[a] - r.positions[b]).norm();
            spatial += ((lr - lg) / lg).powi(2);
        }
    }
    let spatial = (spatial / (ground.len() * edges.len()).max(1) as f64).sqrt();
    let temporal = if ground.len() < 2 {
        0.0
    } else {
        let mut sum = 0.0;
        for t in 1..ground.len() {
            for i in 0..ground[0].vertex_count() {
                let dg = ground[t].positions[i] - ground[t - 1].positions[i];
                let dr = recon[t].positions[i] - recon[t - 1].positions[i];
                sum += (dr - dg).norm_squared();
            }
        }
        (sum / ((ground.len() - 1) * ground[0].vertex_count()) as f64).sqrt()
    };
    Ok(StedParts { spatial, temporal })
}

/// Simplified STED: spatial plus temporal term with unit weights.
pub fn sted_simplified(ground: &[TriangleMesh], recon: &[TriangleMesh]) -> Result<f64, MetricsError> {
    sted_parts(ground, recon).map(|p| p.total())
}

/// `||X_i - Xhat_i||^2 / ||X_i||^2` for every shape.
pub fn percentage_errors(x: &[AcapFeature], xhat: &[AcapFeature]) -> Result<Vec<f64>, MetricsError> {
    if x.len() != xhat.len() {
        return Err(MetricsError::CountMismatch { ground: x.len(), recon: xhat.len() });
    }
    if x.is_empty() {
        return Err(MetricsError::Empty);
    }
    x.iter()
        .zip(xhat)
        .enumerate()
        .map(|(index, (a, b))| {
            if a.vertex_count() != b.vertex_count() {
                return Err(MetricsError::FeatureSize { index });
            }
            let norm = a.squared_norm();
            if norm == 0.0 {
                return Err(MetricsError::ZeroNorm { index });
            }
            let diff: f64 = a.flat().zip(b.flat()).map(|(p, q)| (p - q) * (p - q)).sum();
            Ok(diff / norm)
        })
        .collect()
}

/// Largest per-shape percentage error.
pub fn percentage_error(x: &[AcapFeature], xhat: &[AcapFeature]) -> Result<f64, MetricsError> {
    Ok(percentage_errors(x, xhat)?.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEval {
    pub name: String,
    pub e_rms: f64,
    pub percentage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub shapes: Vec<ShapeEval>,
    pub e_rms: f64,
    pub sted_simplified: f64,
    pub sted_spatial: f64,
    pub sted_temporal: f64,
    /// Worst per-shape percentage error.
    pub percentage: f64,
}

impl EvalReport {
    /// `ground`/`recon` are raw meshes; normalization happens here.
    pub fn compute(
        ground: &[TriangleMesh],
        recon: &[TriangleMesh],
        x: &[AcapFeature],
        xhat: &[AcapFeature],
    ) -> Result<Self, MetricsError> {
        check_pairs(ground, recon)?;
        let (g, r) = normalize_pairs(ground, recon);
        let per_shape = e_rms_per_shape(&g, &r)?;
        let perc = percentage_errors(x, xhat)?;
        if perc.len() != ground.len() {
            return Err(MetricsError::CountMismatch { ground: ground.len(), recon: perc.len() });
        }
        let sted = sted_parts(&g, &r)?;
        Ok(Self {
            shapes: ground
                .iter()
                .zip(per_shape.iter().zip(&perc))
                .map(|(m, (&e, &p))| ShapeEval { name: m.name.clone(), e_rms: e, percentage: p })
                .collect(),
            e_rms: e_rms(&g, &r)?,
            sted_simplified: sted.total(),
            sted_spatial: sted.spatial,
            sted_temporal: sted.temporal,
            percentage: perc.iter().copied().fold(0.0, f64::max),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let width = self.shapes.iter().map(|s| s.name.len()).max().unwrap_or(0).max("shape".len());
        let mut out = format!("{:<width$}  {:>12}  {:>12}\n", "shape", "e_rms", "percentage");
        for s in &self.shapes {
            out.push_str(&format!("{:<width$}  {:>12.6}  {:>12.6e}\n", s.name, s.e_rms, s.percentage));
        }
        out.push_str(&format!("{:<width$}  {:>12.6}  {:>12.6e}\n", "all", self.e_rms, self.percentage));
        out.push_str(&format!(
            "sted_simplified {:.6e} (spatial {:.6e}, temporal {:.6e})\n",
            self.sted_simplified, self.sted_spatial, self.sted_temporal
        ));
        out
    }
}
