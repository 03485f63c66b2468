use std::f64::consts::TAU;

use nalgebra::Vector3;

use super::transform::RotationLog;
use crate::mesh::Adjacency;

/// Range of `2*pi*k` offsets tried for every vertex.
const WINDINGS: std::ops::RangeInclusive<i32> = -2..=2;

/// Greedy breadth-first propagation from vertex 0 that picks, for each vertex,
/// the equivalent axis-angle representation closest to the mean `r` of its
/// already-assigned neighbors. The rotations themselves never change.
///
/// Vertices unreachable from vertex 0 keep their input representation.
pub fn make_consistent(logs: &[RotationLog], adj: &Adjacency) -> Vec<RotationLog> {
    let mut out = logs.to_vec();
    let mut assigned = vec![false; logs.len()];
    for v in adj.bfs_order(0) {
        let mut sum = Vector3::zeros();
        let mut count = 0usize;
        for &n in adj.neighbors(v) {
            if assigned[n] {
                sum += out[n].r();
                count += 1;
            }
        }
        assigned[v] = true;
        if count == 0 {
            continue;
        }
        let target = sum / count as f64;
        let log = logs[v];
        // a zero rotation has no preferred axis; wind about the target's
        let axis = if log.angle == 0.0 && target.norm() > 0.0 { target.normalize() } else { log.axis };
        let mut best = RotationLog { axis, angle: log.angle, ambiguous: log.ambiguous };
        let mut best_dist = f64::INFINITY;
        for k in WINDINGS {
            let shift = TAU * k as f64;
            for (cand_axis, cand_angle) in [(axis, log.angle + shift), (-axis, -log.angle + shift)] {
                let d = (cand_axis * cand_angle - target).norm();
                if d < best_dist {
                    best_dist = d;
                    best = RotationLog { axis: cand_axis, angle: cand_angle, ambiguous: log.ambiguous };
                }
            }
        }
        out[v] = best;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acap::transform::{rotation_exp, rotation_log};
    use crate::mesh::{TriangleMesh, Vec3};
    use std::f64::consts::PI;

    fn strip(n: usize) -> Adjacency {
        let positions = (0..n).map(|i| Vec3::new(i as f64, (i % 2) as f64, 0.0)).collect();
        let faces = (0..n - 2).map(|i| [i, i + 1, i + 2]).collect();
        Adjacency::build(&TriangleMesh::new(positions, faces))
    }

    #[test]
    fn already_consistent_unchanged() {
        let adj = strip(6);
        let l = RotationLog::from_vector(Vector3::new(0.0, 0.0, PI / 2.0));
        let out = make_consistent(&vec![l; 6], &adj);
        for o in &out {
            assert!((o.r() - l.r()).norm() < 1e-15);
        }
    }

    #[test]
    fn two_pi_equivalent_selected() {
        let adj = strip(3);
        let a = RotationLog::from_vector(Vector3::new(0.0, 0.0, 3.0));
        let b = RotationLog::from_vector(Vector3::new(0.0, 0.0, 3.0 - TAU));
        let out = make_consistent(&[a, b, a], &adj);
        assert!((out[1].r() - Vector3::new(0.0, 0.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn rotations_preserved() {
        let adj = strip(8);
        let logs: Vec<RotationLog> = (0..8)
            .map(|i| rotation_log(&rotation_exp(&Vector3::new(0.1, 0.2, 1.0).normalize().scale(0.5 + 0.6 * i as f64))))
            .collect();
        let out = make_consistent(&logs, &adj);
        for (a, b) in logs.iter().zip(&out) {
            assert!((rotation_exp(&a.r()) - rotation_exp(&b.r())).norm() < 1e-8);
        }
        // angle grows monotonically past pi once unwrapped
        for w in out.windows(2) {
            assert!((w[1].r() - w[0].r()).norm() < 0.7);
        }
    }

    #[test]
    fn zero_rotation_winds_about_neighbors() {
        let adj = strip(3);
        let a = RotationLog::from_vector(Vector3::new(0.0, 0.0, TAU - 0.1));
        let id = RotationLog::from_vector(Vector3::zeros());
        let out = make_consistent(&[a, id, a], &adj);
        assert!((out[1].r() - Vector3::new(0.0, 0.0, TAU)).norm() < 1e-12);
    }
}
