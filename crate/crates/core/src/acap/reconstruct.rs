//! Global least-squares recovery of vertex positions from per-vertex transforms.
//!
//! Minimizes `sum_i sum_{j in N(i)} c_ij |(p_i - p_j) - T_i (q_i - q_j)|^2`
//! over positions `p`, with `q` the reference positions and one anchor vertex
//! pinned to its reference location. The normal equations are a weighted
//! graph Laplacian that does not depend on `T`, so the factorization is
//! computed once and reused for every solve.

use nalgebra::Matrix3;
use sprs::{FillInReduction, SymmetryCheck, TriMat};
use sprs_ldl::{Ldl, LdlNumeric};

use super::transform::rotation_exp;
use super::{AcapFeature, FeatureScaler};
use crate::error::AcapError;
use crate::mesh::{Adjacency, CotanWeights, TriangleMesh, Vec3};

pub struct ReconstructionSystem {
    reference: TriangleMesh,
    adj: Adjacency,
    weights: Vec<Vec<f64>>,
    anchor: usize,
    /// Unknown index per vertex; `None` for the anchor.
    column: Vec<Option<usize>>,
    factor: LdlNumeric<f64, usize>,
}

impl std::fmt::Debug for ReconstructionSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReconstructionSystem")
            .field("vertices", &self.reference.vertex_count())
            .field("anchor", &self.anchor)
            .finish()
    }
}

impl ReconstructionSystem {
    pub fn new(
        reference: &TriangleMesh,
        weights: &CotanWeights,
        adj: &Adjacency,
        anchor: usize,
    ) -> Result<Self, AcapError> {
        let v = reference.vertex_count();
        if anchor >= v {
            return Err(AcapError::BadAnchor { anchor });
        }
        if let Some(vertex) = adj.first_unreachable() {
            return Err(AcapError::RankDeficient { vertex });
        }
        let aligned = weights.aligned(adj);
        let mut column = vec![None; v];
        let mut next = 0;
        for (i, c) in column.iter_mut().enumerate() {
            if i != anchor {
                *c = Some(next);
                next += 1;
            }
        }
        let n = v - 1;
        let mut tri = TriMat::new((n, n));
        for i in 0..v {
            let Some(row) = column[i] else { continue };
            let mut diag = 0.0;
            for (k, &j) in adj.neighbors(i).iter().enumerate() {
                let c = 2.0 * aligned[i][k];
                diag += c;
                if let Some(col) = column[j] {
                    tri.add_triplet(row, col, -c);
                }
            }
            tri.add_triplet(row, row, diag);
        }
        let matrix = tri.to_csc::<usize>();
        let factor = Ldl::new()
            .check_symmetry(SymmetryCheck::DontCheckSymmetry)
            .fill_in_reduction(FillInReduction::ReverseCuthillMcKee)
            .numeric(matrix.view())
            .map_err(|e| AcapError::Factorization(e.to_string()))?;
        if let Some(pos) = factor.d().iter().position(|d| !d.is_finite() || *d <= 0.0) {
            return Err(AcapError::Factorization(format!("non-positive pivot at {pos}")));
        }
        Ok(Self { reference: reference.clone(), adj: adj.clone(), weights: aligned, anchor, column, factor })
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn reference(&self) -> &TriangleMesh {
        &self.reference
    }

    /// Positions minimizing the transform-fitting energy for `transforms`.
    pub fn solve(&self, transforms: &[Matrix3<f64>]) -> Result<TriangleMesh, AcapError> {
        let v = self.reference.vertex_count();
        if transforms.len() != v {
            return Err(AcapError::FeatureSize { expected: v, got: transforms.len() });
        }
        let q = &self.reference.positions;
        let pinned = q[self.anchor];
        let n = v - 1;
        let mut rhs = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for i in 0..v {
            let Some(row) = self.column[i] else { continue };
            let mut b = Vec3::zeros();
            for (k, &j) in self.adj.neighbors(i).iter().enumerate() {
                let c = self.weights[i][k];
                b += c * ((transforms[i] + transforms[j]) * (q[i] - q[j]));
                if self.column[j].is_none() {
                    b += 2.0 * c * pinned;
                }
            }
            for d in 0..3 {
                rhs[d][row] = b[d];
            }
        }
        let solved: Vec<Vec<f64>> = rhs.iter().map(|r| self.factor.solve(r)).collect();
        let positions = (0..v)
            .map(|i| match self.column[i] {
                Some(row) => Vec3::new(solved[0][row], solved[1][row], solved[2][row]),
                None => pinned,
            })
            .collect();
        Ok(TriangleMesh { positions, faces: self.reference.faces.clone(), name: String::new() })
    }

    /// Unscales `feature`, rebuilds `T_i = exp(skew(r_i)) S_i` and solves.
    pub fn reconstruct(&self, feature: &AcapFeature, scaler: &FeatureScaler) -> Result<TriangleMesh, AcapError> {
        self.solve(&transforms_from_raw(&scaler.inverse(feature)))
    }
}

/// Per-vertex transforms from an unscaled feature.
pub fn transforms_from_raw(raw: &AcapFeature) -> Vec<Matrix3<f64>> {
    raw.rows()
        .iter()
        .map(|q| {
            let rotation = rotation_exp(&nalgebra::Vector3::new(q[0], q[1], q[2]));
            let stretch = Matrix3::new(q[3], q[4], q[5], q[4], q[6], q[7], q[5], q[7], q[8]);
            rotation * stretch
        })
        .collect()
}

/// One-shot reconstruction; builds and discards the factorization.
pub fn reconstruct_positions(
    feature: &AcapFeature,
    scaler: &FeatureScaler,
    reference: &TriangleMesh,
    weights: &CotanWeights,
    adj: &Adjacency,
    anchor: usize,
) -> Result<TriangleMesh, AcapError> {
    ReconstructionSystem::new(reference, weights, adj, anchor)?.reconstruct(feature, scaler)
}
