//! One autoencoder block: graph convolution, a tied fully-connected layer,
//! the three-term loss, analytic gradients and ADAM.
//!
//! Per-vertex signals are flat `V * MU` slices in vertex-major order.
//! Matrices are row-major; a conv computes `y_i = Wp x_i + Wn mean_j(x_j) + b`.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acap::MU;
use crate::mesh::{Adjacency, GeodesicCache};

const MM: usize = MU * MU;

/// Compressed neighbor lists with inverse degrees.
#[derive(Debug, Clone)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    inv_degree: Vec<f64>,
}

impl Graph {
    pub fn new(adj: &Adjacency) -> Self {
        let mut offsets = vec![0];
        let mut neighbors = Vec::new();
        let mut inv_degree = Vec::with_capacity(adj.vertex_count());
        for n in adj.iter() {
            neighbors.extend_from_slice(n);
            offsets.push(neighbors.len());
            inv_degree.push(if n.is_empty() { 0.0 } else { 1.0 / n.len() as f64 });
        }
        Self { offsets, neighbors, inv_degree }
    }

    pub fn vertex_count(&self) -> usize {
        self.inv_degree.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Row `i` of the output is the mean of `x` over the neighbors of `i`.
    pub fn neighbor_mean(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for i in 0..self.vertex_count() {
            let row = &mut out[i * MU..(i + 1) * MU];
            for &j in self.neighbors(i) {
                for (o, v) in row.iter_mut().zip(&x[j * MU..(j + 1) * MU]) {
                    *o += v;
                }
            }
            let s = self.inv_degree[i];
            row.iter_mut().for_each(|o| *o *= s);
        }
        out
    }

    /// Adjoint of [`Graph::neighbor_mean`].
    pub fn neighbor_mean_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        for i in 0..self.vertex_count() {
            let row = &mut out[i * MU..(i + 1) * MU];
            for &j in self.neighbors(i) {
                let s = self.inv_degree[j];
                for (o, v) in row.iter_mut().zip(&y[j * MU..(j + 1) * MU]) {
                    *o += s * v;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConvParams {
    pub w_point: Vec<f64>,
    pub w_neighbor: Vec<f64>,
    pub b: Vec<f64>,
}

impl GraphConvParams {
    pub fn zeros() -> Self {
        Self { w_point: vec![0.0; MM], w_neighbor: vec![0.0; MM], b: vec![0.0; MU] }
    }

    pub fn identity_point() -> Self {
        let mut p = Self::zeros();
        for a in 0..MU {
            p.w_point[a * MU + a] = 1.0;
        }
        p
    }

    fn random(rng: &mut ChaCha8Rng, scale: f64) -> Self {
        let mut p = Self::zeros();
        for w in p.w_point.iter_mut().chain(p.w_neighbor.iter_mut()) {
            *w = rng.random_range(-scale..scale);
        }
        p
    }

    /// Pre-activation output given the input and its neighbor mean.
    fn apply(&self, x: &[f64], mx: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for ((y, xi), mi) in out.chunks_exact_mut(MU).zip(x.chunks_exact(MU)).zip(mx.chunks_exact(MU)) {
            for a in 0..MU {
                let wp = &self.w_point[a * MU..(a + 1) * MU];
                let wn = &self.w_neighbor[a * MU..(a + 1) * MU];
                let mut s = self.b[a];
                for c in 0..MU {
                    s += wp[c] * xi[c] + wn[c] * mi[c];
                }
                y[a] = s;
            }
        }
        out
    }

    /// Accumulates parameter gradients for pre-activation gradient `dy` and
    /// returns the gradient with respect to the input.
    fn backward(&self, x: &[f64], mx: &[f64], dy: &[f64], grad: &mut GraphConvParams, graph: &Graph) -> Vec<f64> {
        let mut dx = vec![0.0; x.len()];
        let mut dm = vec![0.0; x.len()];
        for (i, d) in dy.chunks_exact(MU).enumerate() {
            let xi = &x[i * MU..(i + 1) * MU];
            let mi = &mx[i * MU..(i + 1) * MU];
            for a in 0..MU {
                let da = d[a];
                if da == 0.0 {
                    continue;
                }
                grad.b[a] += da;
                for c in 0..MU {
                    grad.w_point[a * MU + c] += da * xi[c];
                    grad.w_neighbor[a * MU + c] += da * mi[c];
                    dx[i * MU + c] += self.w_point[a * MU + c] * da;
                    dm[i * MU + c] += self.w_neighbor[a * MU + c] * da;
                }
            }
        }
        for (o, v) in dx.iter_mut().zip(graph.neighbor_mean_adjoint(&dm)) {
            *o += v;
        }
        dx
    }

    fn add_assign(&mut self, other: &Self) {
        add(&mut self.w_point, &other.w_point);
        add(&mut self.w_neighbor, &other.w_neighbor);
        add(&mut self.b, &other.b);
    }
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Pre-activation graph convolution of `x`.
pub fn graph_conv(params: &GraphConvParams, x: &[f64], graph: &Graph) -> Vec<f64> {
    params.apply(x, &graph.neighbor_mean(x))
}

/// Trainable state of one autoencoder plus its locality mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AEBlockParams {
    pub conv_enc: GraphConvParams,
    /// Tied fully-connected matrix, `kz` rows of length `V * MU`.
    pub c: Vec<f64>,
    pub conv_dec: GraphConvParams,
    pub kz: usize,
    pub vertex_count: usize,
    /// Locality radius in normalized geodesic units.
    pub radius: f64,
    pub centers: Vec<usize>,
    /// `kz x V`, row-major; 1 where the sparsity penalty applies.
    pub mask: Vec<u8>,
}

/// Gradients with the same layout as the trainable tensors of [`AEBlockParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct AeGradients {
    pub conv_enc: GraphConvParams,
    pub c: Vec<f64>,
    pub conv_dec: GraphConvParams,
}

impl AeGradients {
    pub fn zeros(kz: usize, v: usize) -> Self {
        Self { conv_enc: GraphConvParams::zeros(), c: vec![0.0; kz * v * MU], conv_dec: GraphConvParams::zeros() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.conv_enc.add_assign(&other.conv_enc);
        add(&mut self.c, &other.c);
        self.conv_dec.add_assign(&other.conv_dec);
    }

    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            &self.conv_enc.w_point,
            &self.conv_enc.w_neighbor,
            &self.conv_enc.b,
            &self.c,
            &self.conv_dec.w_point,
            &self.conv_dec.w_neighbor,
            &self.conv_dec.b,
        ]
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0))
    }
}

impl AEBlockParams {
    pub fn zeros(kz: usize, vertex_count: usize, radius: f64) -> Self {
        Self {
            conv_enc: GraphConvParams::zeros(),
            c: vec![0.0; kz * vertex_count * MU],
            conv_dec: GraphConvParams::zeros(),
            kz,
            vertex_count,
            radius,
            centers: vec![0; kz],
            mask: vec![0; kz * vertex_count],
        }
    }

    /// Conv weights uniform in `[-0.05, 0.05]`, `C` uniform in `[-0.01, 0.01]`, zero biases.
    pub fn random(kz: usize, vertex_count: usize, radius: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv_enc = GraphConvParams::random(&mut rng, 0.05);
        let c = (0..kz * vertex_count * MU).map(|_| rng.random_range(-0.01..0.01)).collect();
        let conv_dec = GraphConvParams::random(&mut rng, 0.05);
        Self { conv_enc, c, conv_dec, ..Self::zeros(kz, vertex_count, radius) }
    }

    pub fn width(&self) -> usize {
        self.vertex_count * MU
    }

    /// Row `k` of `C`, i.e. `C^r_k` flattened.
    pub fn c_row(&self, k: usize) -> &[f64] {
        let w = self.width();
        &self.c[k * w..(k + 1) * w]
    }

    /// `||C_{k,i}||_2`, the norm of vertex `i`'s block in row `k`.
    pub fn group_norm(&self, k: usize, i: usize) -> f64 {
        self.c_row(k)[i * MU..(i + 1) * MU].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mask_at(&self, k: usize, i: usize) -> bool {
        self.mask[k * self.vertex_count + i] != 0
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            &mut self.conv_enc.w_point,
            &mut self.conv_enc.w_neighbor,
            &mut self.conv_enc.b,
            &mut self.c,
            &mut self.conv_dec.w_point,
            &mut self.conv_dec.w_neighbor,
            &mut self.conv_dec.b,
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            &self.conv_enc.w_point,
            &self.conv_enc.w_neighbor,
            &self.conv_enc.b,
            &self.c,
            &self.conv_dec.w_point,
            &self.conv_dec.w_neighbor,
            &self.conv_dec.b,
        ]
    }

    pub fn grad_zeros(&self) -> AeGradients {
        AeGradients::zeros(self.kz, self.vertex_count)
    }

    /// `z = C vec(h)`.
    pub fn encode_fc(&self, h: &[f64]) -> Vec<f64> {
        (0..self.kz).map(|k| dot(self.c_row(k), h)).collect()
    }

    /// `C^T z` reshaped to `V x MU`, before any activation.
    pub fn decode_fc(&self, z: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.width()];
        for (k, &zk) in z.iter().enumerate() {
            if zk != 0.0 {
                for (o, c) in u.iter_mut().zip(self.c_row(k)) {
                    *o += zk * c;
                }
            }
        }
        u
    }

    /// Decoder output for latent `z`.
    pub fn decode(&self, z: &[f64], graph: &Graph) -> Vec<f64> {
        let g: Vec<f64> = self.decode_fc(z).into_iter().map(f64::tanh).collect();
        let mut out = graph_conv(&self.conv_dec, &g, graph);
        out.iter_mut().for_each(|v| *v = v.tanh());
        out
    }

    /// Moves each center to the vertex with the largest group norm in its
    /// row (lowest index on ties).
    pub fn update_centers(&mut self) {
        for k in 0..self.kz {
            let mut best = 0;
            let mut best_norm = f64::NEG_INFINITY;
            for i in 0..self.vertex_count {
                let n = self.group_norm(k, i);
                if n > best_norm {
                    best_norm = n;
                    best = i;
                }
            }
            self.centers[k] = best;
        }
    }

    /// `mask_ki = 1` iff the normalized geodesic distance from `c_k` to `i` is at least `radius`.
    pub fn update_mask(&mut self, geo: &GeodesicCache) {
        for k in 0..self.kz {
            let field = geo.field(self.centers[k]);
            for i in 0..self.vertex_count {
                self.mask[k * self.vertex_count + i] = u8::from(field.dist[i] >= self.radius);
            }
        }
    }
}

/// Recomputes centers from `C` and then the geodesic mask.
pub fn update_sparsity_mask(params: &mut AEBlockParams, geo: &GeodesicCache) {
    params.update_centers();
    params.update_mask(geo);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct AeCache {
    pub x: Vec<f64>,
    mx: Vec<f64>,
    h: Vec<f64>,
    pub z: Vec<f64>,
    g: Vec<f64>,
    mg: Vec<f64>,
    pub xhat: Vec<f64>,
}

pub fn ae_forward(params: &AEBlockParams, x: &[f64], graph: &Graph) -> AeCache {
    let mx = graph.neighbor_mean(x);
    let h: Vec<f64> = params.conv_enc.apply(x, &mx).into_iter().map(f64::tanh).collect();
    let z = params.encode_fc(&h);
    let g: Vec<f64> = params.decode_fc(&z).into_iter().map(f64::tanh).collect();
    let mg = graph.neighbor_mean(&g);
    let xhat = params.conv_dec.apply(&g, &mg).into_iter().map(f64::tanh).collect();
    AeCache { x: x.to_vec(), mx, h, z, g, mg, xhat }
}

/// Backpropagates `dxhat` (and an extra latent gradient `dz_extra`) through one
/// cached forward pass, accumulating into `grad`. Returns the input gradient
/// when `want_dx` is set.
pub fn ae_backward(
    params: &AEBlockParams,
    graph: &Graph,
    cache: &AeCache,
    dxhat: &[f64],
    dz_extra: Option<&[f64]>,
    grad: &mut AeGradients,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let da2: Vec<f64> = dxhat.iter().zip(&cache.xhat).map(|(d, y)| d * (1.0 - y * y)).collect();
    let dg = params.conv_dec.backward(&cache.g, &cache.mg, &da2, &mut grad.conv_dec, graph);
    let du: Vec<f64> = dg.iter().zip(&cache.g).map(|(d, g)| d * (1.0 - g * g)).collect();
    let w = params.width();
    let mut dz = dz_extra.map_or_else(|| vec![0.0; params.kz], <[f64]>::to_vec);
    for k in 0..params.kz {
        let zk = cache.z[k];
        let row = params.c_row(k);
        let grow = &mut grad.c[k * w..(k + 1) * w];
        let mut s = 0.0;
        for p in 0..w {
            grow[p] += zk * du[p];
            s += row[p] * du[p];
        }
        dz[k] += s;
    }
    let mut dh = vec![0.0; w];
    for k in 0..params.kz {
        let dzk = dz[k];
        if dzk == 0.0 {
            continue;
        }
        let row = params.c_row(k);
        let grow = &mut grad.c[k * w..(k + 1) * w];
        for p in 0..w {
            grow[p] += dzk * cache.h[p];
            dh[p] += dzk * row[p];
        }
    }
    let da1: Vec<f64> = dh.iter().zip(&cache.h).map(|(d, h)| d * (1.0 - h * h)).collect();
    let dx = params.conv_enc.backward(&cache.x, &cache.mx, &da1, &mut grad.conv_enc, graph);
    want_dx.then_some(dx)
}

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub theta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 10.0, lambda2: 1.0, theta: 5.0 }
    }
}

/// Unweighted loss terms of one block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub recon: f64,
    pub sparsity: f64,
    pub nontrivial: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.lambda1 * self.recon + w.lambda2 * self.sparsity + self.nontrivial
    }

    pub fn add(&mut self, o: &LossParts) {
        self.recon += o.recon;
        self.sparsity += o.sparsity;
        self.nontrivial += o.nontrivial;
    }
}

/// Masked group-sparsity term `(1/kz) sum_k sum_i mask_ki ||C_{k,i}||`.
pub fn sparsity_term(params: &AEBlockParams) -> f64 {
    let mut s = 0.0;
    for k in 0..params.kz {
        for i in 0..params.vertex_count {
            if params.mask_at(k, i) {
                s += params.group_norm(k, i);
            }
        }
    }
    if params.kz == 0 {
        0.0
    } else {
        s / params.kz as f64
    }
}

/// Hinge `(1/kz) sum_j max(max_m |Z_mj| - theta, 0)` over latent rows `zs`.
pub fn nontrivial_term(zs: &[&[f64]], kz: usize, theta: f64) -> f64 {
    if kz == 0 {
        return 0.0;
    }
    (0..kz)
        .map(|j| {
            let peak = zs.iter().map(|z| z[j].abs()).fold(0.0, f64::max);
            (peak - theta).max(0.0)
        })
        .sum::<f64>()
        / kz as f64
}

/// Mean squared reconstruction error `(1/N) sum_n ||x_n - xhat_n||^2`.
pub fn recon_term(xs: &[&[f64]], xhats: &[&[f64]]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().zip(xhats).map(|(x, y)| x.iter().zip(*y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum::<f64>()
        / xs.len() as f64
}

/// Total loss and its parts for one block over a batch.
pub fn loss_ae(
    params: &AEBlockParams,
    xs: &[&[f64]],
    xhats: &[&[f64]],
    zs: &[&[f64]],
    weights: &LossWeights,
) -> (f64, LossParts) {
    let parts = LossParts {
        recon: recon_term(xs, xhats),
        sparsity: sparsity_term(params),
        nontrivial: nontrivial_term(zs, params.kz, weights.theta),
    };
    (parts.total(weights), parts)
}

/// Adds `scale * d(sparsity)/dC` to `grad_c`; zero at zero-norm groups.
pub fn add_sparsity_grad(params: &AEBlockParams, scale: f64, grad_c: &mut [f64]) {
    if params.kz == 0 {
        return;
    }
    let s = scale / params.kz as f64;
    let w = params.width();
    for k in 0..params.kz {
        for i in 0..params.vertex_count {
            if !params.mask_at(k, i) {
                continue;
            }
            let n = params.group_norm(k, i);
            if n == 0.0 {
                continue;
            }
            let base = k * w + i * MU;
            for c in 0..MU {
                grad_c[base + c] += s * params.c[base + c] / n;
            }
        }
    }
}

/// Per-sample latent gradients of the hinge term. The subgradient goes to
/// the first sample attaining the maximum of each active latent dimension.
pub fn nontrivial_grads(zs: &[&[f64]], kz: usize, theta: f64) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; kz]; zs.len()];
    if kz == 0 {
        return out;
    }
    for j in 0..kz {
        let mut arg = None;
        let mut peak = f64::NEG_INFINITY;
        for (m, z) in zs.iter().enumerate() {
            if z[j].abs() > peak {
                peak = z[j].abs();
                arg = Some(m);
            }
        }
        if let Some(m) = arg {
            if peak > theta {
                out[m][j] = zs[m][j].signum() / kz as f64;
            }
        }
    }
    out
}

/// Loss and parameter gradients of one standalone block over a batch.
pub fn backward(
    params: &AEBlockParams,
    graph: &Graph,
    batch: &[&[f64]],
    weights: &LossWeights,
) -> (f64, LossParts, AeGradients) {
    let caches: Vec<AeCache> = batch.iter().map(|x| ae_forward(params, x, graph)).collect();
    let xhats: Vec<&[f64]> = caches.iter().map(|c| c.xhat.as_slice()).collect();
    let zs: Vec<&[f64]> = caches.iter().map(|c| c.z.as_slice()).collect();
    let (total, parts) = loss_ae(params, batch, &xhats, &zs, weights);
    let dzs = nontrivial_grads(&zs, params.kz, weights.theta);
    let mut grad = params.grad_zeros();
    let scale = 2.0 * weights.lambda1 / batch.len().max(1) as f64;
    for ((cache, x), dz) in caches.iter().zip(batch).zip(&dzs) {
        let dxhat: Vec<f64> = cache.xhat.iter().zip(*x).map(|(y, t)| scale * (y - t)).collect();
        ae_backward(params, graph, cache, &dxhat, Some(dz), &mut grad, false);
    }
    add_sparsity_grad(params, weights.lambda2, &mut grad.c);
    (total, parts, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Learning rate is multiplied by `decay^(step / decay_steps)`.
    pub decay: f64,
    pub decay_steps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, decay: 0.95, decay_steps: 1000.0 }
    }
}

/// Moment accumulators for a fixed list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Learning rate used by the next step.
    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        c.learning_rate * c.decay.powf(self.step as f64 / c.decay_steps)
    }

    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "tensor count mismatch");
        assert_eq!(grads.len(), self.m.len(), "tensor count mismatch");
        let lr = self.current_lr();
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.len(), g.len(), "tensor shape mismatch");
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
    }
}

/// One ADAM update of a standalone block.
pub fn adam_step(state: &mut AdamState, params: &mut AEBlockParams, grads: &AeGradients) {
    state.update(&mut params.tensors_mut(), &grads.tensors());
}
