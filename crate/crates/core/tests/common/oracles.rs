//! Brute-force reference implementations written directly from the metric
//! definitions, with flat index loops and no shared helpers.

use meshmodes::{AcapFeature, TriangleMesh, MU};

pub fn e_rms(g: &[TriangleMesh], r: &[TriangleMesh]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in 0..g.len() {
        for v in 0..g[s].positions.len() {
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = g[s].positions[v][c] - r[s].positions[v][c];
                d2 += d * d;
            }
            sum += d2;
            n += 1;
        }
    }
    (sum / n as f64).sqrt() * 1000.0
}

fn dist(m: &TriangleMesh, a: usize, b: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..3 {
        let d = m.positions[a][c] - m.positions[b][c];
        s += d * d;
    }
    s.sqrt()
}

pub fn sted(g: &[TriangleMesh], r: &[TriangleMesh]) -> f64 {
    let mut edges = std::collections::BTreeSet::new();
    for f in &g[0].faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            edges.insert((a.min(b), a.max(b)));
        }
    }
    let mut spatial = 0.0;
    let mut count = 0usize;
    for s in 0..g.len() {
        for &(a, b) in &edges {
            let lg = dist(&g[s], a, b);
            let lr = dist(&r[s], a, b);
            let e = (lr - lg) / lg;
            spatial += e * e;
            count += 1;
        }
    }
    let spatial = (spatial / count as f64).sqrt();
    if g.len() < 2 {
        return spatial;
    }
    let mut temporal = 0.0;
    let mut tcount = 0usize;
    for t in 0..g.len() - 1 {
        for v in 0..g[t].positions.len() {
            let mut d2 = 0.0;
            for c in 0..3 {
                let dg = g[t + 1].positions[v][c] - g[t].positions[v][c];
                let dr = r[t + 1].positions[v][c] - r[t].positions[v][c];
                d2 += (dr - dg) * (dr - dg);
            }
            temporal += d2;
            tcount += 1;
        }
    }
    spatial + (temporal / tcount as f64).sqrt()
}

pub fn percentage(x: &[AcapFeature], xh: &[AcapFeature]) -> f64 {
    let mut worst = 0.0f64;
    for s in 0..x.len() {
        let (mut num, mut den) = (0.0, 0.0);
        for v in 0..x[s].vertex_count() {
            for c in 0..MU {
                let a = x[s].rows()[v][c];
                let b = xh[s].rows()[v][c];
                num += (a - b) * (a - b);
                den += a * a;
            }
        }
        worst = worst.max(num / den);
    }
    worst
}
