//! The ACAP per-vertex deformation feature: rotation logarithm plus the
//! symmetric stretch of each vertex's deformation gradient, relative to a
//! reference shape with the same connectivity.
//!
//! Channel layout per vertex: `[r0, r1, r2, S11, S12, S13, S22, S23, S33]`.

mod cache;
mod consistency;
mod reconstruct;
mod scaler;
mod transform;

use rayon::prelude::*;

pub use cache::{read_feature_cache, write_feature_cache, FeatureCache, CACHE_MAGIC, S_BLOCK_RAW};
pub use consistency::make_consistent;
pub use reconstruct::{reconstruct_positions, transforms_from_raw, ReconstructionSystem};
pub use scaler::{BlockRange, FeatureScaler, FEATURE_BOUND, IDENTITY_FEATURE, MIN_EXTENT};
pub use transform::{
    deformation_gradients, polar_decompose, rotation_exp, rotation_log, skew, DeformGradientField, RotationLog,
    AMBIGUOUS_ANGLE, GRADIENT_REGULARIZATION,
};

use crate::error::AcapError;
use crate::mesh::{check_shared_connectivity, Adjacency, CotanWeights, TriangleMesh};

/// Feature channels per vertex.
pub const MU: usize = 9;

/// A `V x 9` per-vertex feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AcapFeature {
    rows: Vec<[f64; MU]>,
}

impl AcapFeature {
    pub fn new(rows: Vec<[f64; MU]>) -> Self {
        Self { rows }
    }

    pub fn zeros(vertex_count: usize) -> Self {
        Self { rows: vec![[0.0; MU]; vertex_count] }
    }

    pub fn vertex_count(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[[f64; MU]] {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut [[f64; MU]] {
        &mut self.rows
    }

    pub fn into_rows(self) -> Vec<[f64; MU]> {
        self.rows
    }

    /// Entries in vertex-major order.
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().flat_map(|r| r.iter().copied())
    }

    pub fn squared_norm(&self) -> f64 {
        self.flat().map(|v| v * v).sum()
    }

    /// Largest ambiguity-free-ness check: true when any entry is non-finite.
    pub fn has_non_finite(&self) -> bool {
        self.flat().any(|v| !v.is_finite())
    }
}

impl From<Vec<[f64; MU]>> for AcapFeature {
    fn from(rows: Vec<[f64; MU]>) -> Self {
        Self::new(rows)
    }
}

/// Encodes shapes against a fixed reference mesh.
#[derive(Debug, Clone)]
pub struct AcapEncoder {
    reference: TriangleMesh,
    weights: CotanWeights,
    adj: Adjacency,
}

impl AcapEncoder {
    pub fn new(reference: &TriangleMesh) -> Result<Self, AcapError> {
        reference.validate()?;
        let weights = CotanWeights::compute(reference)?;
        let adj = Adjacency::build(reference);
        Ok(Self { reference: reference.clone(), weights, adj })
    }

    pub fn reference(&self) -> &TriangleMesh {
        &self.reference
    }

    pub fn weights(&self) -> &CotanWeights {
        &self.weights
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adj
    }

    /// Unscaled feature of `shape`.
    pub fn encode_raw(&self, shape: &TriangleMesh) -> Result<AcapFeature, AcapError> {
        if !self.reference.shares_connectivity(shape) {
            return Err(crate::error::MeshError::ConnectivityMismatch { index: 0 }.into());
        }
        shape.validate()?;
        let field = deformation_gradients(&self.reference, shape, &self.weights, &self.adj)?;
        let mut logs = Vec::with_capacity(field.transforms.len());
        let mut stretches = Vec::with_capacity(field.transforms.len());
        for (vertex, t) in field.transforms.iter().enumerate() {
            let (r, s) = polar_decompose(t, vertex)?;
            logs.push(rotation_log(&r));
            stretches.push(s);
        }
        let logs = make_consistent(&logs, &self.adj);
        let rows = logs
            .iter()
            .zip(&stretches)
            .map(|(l, s)| {
                let r = l.r();
                [r.x, r.y, r.z, s[(0, 0)], s[(0, 1)], s[(0, 2)], s[(1, 1)], s[(1, 2)], s[(2, 2)]]
            })
            .collect();
        Ok(AcapFeature::new(rows))
    }

    pub fn reconstruction_system(&self, anchor: usize) -> Result<ReconstructionSystem, AcapError> {
        ReconstructionSystem::new(&self.reference, &self.weights, &self.adj, anchor)
    }
}

/// Scaled features of a dataset together with the fitted scaler.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    pub features: Vec<AcapFeature>,
    pub scaler: FeatureScaler,
}

/// Full encoding pipeline over `meshes`, with `meshes[reference_index]` as
/// the reference. Shapes are encoded in parallel.
pub fn encode_dataset(meshes: &[TriangleMesh], reference_index: usize) -> Result<EncodedDataset, AcapError> {
    if meshes.len() < 2 {
        return Err(AcapError::TooFewShapes { needed: 2, got: meshes.len() });
    }
    if reference_index >= meshes.len() {
        return Err(AcapError::BadReference { index: reference_index, count: meshes.len() });
    }
    check_shared_connectivity(meshes)?;
    let encoder = AcapEncoder::new(&meshes[reference_index])?;
    let raw: Vec<AcapFeature> = meshes.par_iter().map(|m| encoder.encode_raw(m)).collect::<Result<_, _>>()?;
    let scaler = FeatureScaler::fit(&raw);
    let features = raw.iter().map(|f| scaler.forward(f)).collect();
    Ok(EncodedDataset { features, scaler })
}
