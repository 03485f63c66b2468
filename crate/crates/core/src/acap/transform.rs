//! Per-vertex deformation gradients and their rotation/stretch factorization.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use crate::error::AcapError;
use crate::mesh::{Adjacency, CotanWeights, TriangleMesh};

/// Added to the diagonal of every per-vertex normal matrix before solving.
/// The same amount of identity goes into the right-hand side, so the
/// regularizer pulls toward `T = I` and the reference encodes exactly.
pub const GRADIENT_REGULARIZATION: f64 = 1e-9;

/// Angles closer than this to pi are flagged as having an unresolved axis sign.
pub const AMBIGUOUS_ANGLE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DeformGradientField {
    pub transforms: Vec<Matrix3<f64>>,
}

/// Least-squares transform of each vertex's weighted 1-ring edge vectors
/// from `reference` to `shape`, solved independently per vertex.
pub fn deformation_gradients(
    reference: &TriangleMesh,
    shape: &TriangleMesh,
    weights: &CotanWeights,
    adj: &Adjacency,
) -> Result<DeformGradientField, AcapError> {
    let aligned = weights.aligned(adj);
    let transforms = (0..reference.vertex_count())
        .map(|i| {
            let mut normal = Matrix3::identity() * GRADIENT_REGULARIZATION;
            let mut cross = Matrix3::identity() * GRADIENT_REGULARIZATION;
            for (k, &j) in adj.neighbors(i).iter().enumerate() {
                let c = aligned[i][k];
                let e_ref = reference.positions[i] - reference.positions[j];
                let e_def = shape.positions[i] - shape.positions[j];
                normal += c * e_ref * e_ref.transpose();
                cross += c * e_def * e_ref.transpose();
            }
            // T * normal = cross, normal symmetric: solve normal * T^T = cross^T
            let chol = normal.cholesky().ok_or(AcapError::SingularNormalMatrix { vertex: i })?;
            Ok(chol.solve(&cross.transpose()).transpose())
        })
        .collect::<Result<_, AcapError>>()?;
    Ok(DeformGradientField { transforms })
}

/// `T = R S` with `R` a proper rotation and `S` symmetric positive semi-definite.
///
/// `vertex` only labels the error.
pub fn polar_decompose(t: &Matrix3<f64>, vertex: usize) -> Result<(Matrix3<f64>, Matrix3<f64>), AcapError> {
    let det = t.determinant();
    if det.is_nan() || det <= 0.0 {
        return Err(AcapError::NonPositiveDeterminant { vertex, det });
    }
    let svd = t.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let rotation = u * v_t;
    let stretch = v_t.transpose() * Matrix3::from_diagonal(&svd.singular_values) * v_t;
    let stretch = (stretch + stretch.transpose()) * 0.5;
    Ok((rotation, stretch))
}

/// Axis-angle form of a rotation; `r = angle * axis`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationLog {
    pub axis: Vector3<f64>,
    pub angle: f64,
    /// Angle within [`AMBIGUOUS_ANGLE`] of pi: the axis sign is arbitrary.
    pub ambiguous: bool,
}

impl RotationLog {
    pub fn from_vector(r: Vector3<f64>) -> Self {
        let angle = r.norm();
        let axis = if angle > 0.0 { r / angle } else { Vector3::x() };
        Self { axis, angle, ambiguous: false }
    }

    pub fn r(&self) -> Vector3<f64> {
        self.axis * self.angle
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        rotation_exp(&self.r())
    }
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

pub fn skew(r: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -r.z, r.y, r.z, 0.0, -r.x, -r.y, r.x, 0.0)
}

/// Matrix exponential of `skew(r)` (Rodrigues).
pub fn rotation_exp(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let k = skew(r);
    let (a, b) = if theta2 < 1e-12 {
        // Taylor terms of sin(t)/t and (1-cos t)/t^2
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Principal logarithm of a rotation matrix, angle in `[0, pi]`.
pub fn rotation_log(rotation: &Matrix3<f64>) -> RotationLog {
    let w = vee(rotation);
    let sin = 0.5 * w.norm();
    let cos = ((rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = sin.atan2(cos);
    let ambiguous = PI - angle < AMBIGUOUS_ANGLE;
    if sin == 0.0 && cos > 0.0 {
        return RotationLog { axis: Vector3::x(), angle: 0.0, ambiguous: false };
    }
    let axis = if angle < PI * 0.5 {
        w / w.norm()
    } else {
        // near pi the skew part vanishes; recover the axis from the symmetric part
        let sym = (rotation + rotation.transpose()) * 0.5;
        let outer = (sym - Matrix3::identity() * cos) / (1.0 - cos);
        let col = (0..3).max_by(|&a, &b| outer[(a, a)].total_cmp(&outer[(b, b)])).unwrap_or(0);
        let mut axis = outer.column(col).into_owned();
        axis /= axis.norm();
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        axis
    };
    RotationLog { axis, angle, ambiguous }
}
