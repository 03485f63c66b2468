//! Two-level model: a first autoencoder over the whole feature, attention
//! masks derived from its components, and one second-level autoencoder per
//! first-level component that reconstructs its share of the residual.

mod checkpoint;
mod components;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_components, load_model, model_from_bytes, model_to_bytes, save_model, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use components::{
    active_region, component_similarity, component_strength, decode_delta, extract_components, Component,
    ComponentMeta, ComponentSet, REGION_FRACTION,
};
pub use train::{
    stacked_gradients, stacked_loss, train_joint, train_with_observer, LogEntry, StackedGradients, StepInfo,
    TrainError, TrainLog,
};

use crate::acap::{AcapFeature, FeatureScaler, MU};
use crate::error::ConfigError;
use crate::mesh::{Adjacency, TriangleMesh};
use crate::network::{ae_forward, AEBlockParams, AdamConfig, Graph, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingStrategy {
    /// All blocks optimized together on the summed loss.
    Joint,
    /// First level alone for `epochs`, then frozen while the second level
    /// trains for another `epochs` without gradients into the first level.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub theta: f64,
    pub d1: f64,
    pub d2: f64,
    pub kz0: usize,
    pub kz1: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub decay_steps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub stop_gradient_through_residual: bool,
    pub center_update_every: usize,
    pub seed: u64,
    /// When false the model is a single autoencoder.
    pub second_level: bool,
    /// When false the residual is split uniformly instead of by attention.
    pub attention: bool,
    pub strategy: TrainingStrategy,
    pub probe_level1: f64,
    pub probe_level2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 1.0,
            theta: 5.0,
            d1: 0.4,
            d2: 0.2,
            kz0: 10,
            kz1: 5,
            learning_rate: 1e-3,
            decay: 0.95,
            decay_steps: 1000.0,
            batch_size: 256,
            epochs: 3000,
            eps1: 1e-6,
            eps2: 1e-2,
            stop_gradient_through_residual: false,
            center_update_every: 1,
            seed: 0,
            second_level: true,
            attention: true,
            strategy: TrainingStrategy::Joint,
            probe_level1: 5.0,
            probe_level2: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        let finite = [
            self.lambda1,
            self.lambda2,
            self.theta,
            self.d1,
            self.d2,
            self.learning_rate,
            self.decay,
            self.decay_steps,
            self.eps1,
            self.eps2,
            self.probe_level1,
            self.probe_level2,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return fail("all numeric settings must be finite".into());
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        for (name, v) in [("theta", self.theta), ("eps1", self.eps1), ("eps2", self.eps2)] {
            if v <= 0.0 {
                return fail(format!("{name} must be positive"));
            }
        }
        for (name, d) in [("d1", self.d1), ("d2", self.d2)] {
            if !(d > 0.0 && d <= 1.0) {
                return fail(format!("{name} must lie in (0, 1]"));
            }
        }
        if self.second_level && self.d1 <= self.d2 {
            return fail(format!("d1 ({}) must exceed d2 ({})", self.d1, self.d2));
        }
        if self.kz0 == 0 || (self.second_level && self.kz1 == 0) {
            return fail("latent sizes must be at least 1".into());
        }
        if self.learning_rate <= 0.0 || self.decay <= 0.0 || self.decay > 1.0 || self.decay_steps <= 0.0 {
            return fail("learning rate must be positive and decay in (0, 1]".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.center_update_every == 0 {
            return fail("center_update_every must be at least 1".into());
        }
        if self.strategy == TrainingStrategy::Separate && !self.second_level {
            return fail("separate training needs the second level".into());
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2, theta: self.theta }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            decay: self.decay,
            decay_steps: self.decay_steps,
            ..AdamConfig::default()
        }
    }

    /// Number of second-level autoencoders.
    pub fn second_count(&self) -> usize {
        if self.second_level {
            self.kz0
        } else {
            0
        }
    }
}

/// `K x V` soft weights, row-major; every column sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMasks {
    pub k: usize,
    pub vertex_count: usize,
    pub am: Vec<f64>,
    /// Column sums of the raw masses; zero marks a uniform-fallback column.
    pub(crate) mass: Vec<f64>,
}

impl AttentionMasks {
    pub fn uniform(k: usize, vertex_count: usize) -> Self {
        let w = if k == 0 { 0.0 } else { 1.0 / k as f64 };
        Self { k, vertex_count, am: vec![w; k * vertex_count], mass: vec![0.0; vertex_count] }
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.am[k * self.vertex_count + i]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.am[k * self.vertex_count..(k + 1) * self.vertex_count]
    }

    pub fn column_sum(&self, i: usize) -> f64 {
        (0..self.k).map(|k| self.get(k, i)).sum()
    }
}

/// Column-normalized squared group norms of the first-level components.
pub fn extract_attention(ae0: &AEBlockParams) -> AttentionMasks {
    let (k, v) = (ae0.kz, ae0.vertex_count);
    let mut raw = vec![0.0; k * v];
    for kk in 0..k {
        let row = ae0.c_row(kk);
        for i in 0..v {
            raw[kk * v + i] = row[i * MU..(i + 1) * MU].iter().map(|c| c * c).sum();
        }
    }
    let mut mass = vec![0.0; v];
    for i in 0..v {
        let s: f64 = (0..k).map(|kk| raw[kk * v + i]).sum();
        mass[i] = s;
        for kk in 0..k {
            raw[kk * v + i] = if s > 0.0 { raw[kk * v + i] / s } else { 1.0 / k as f64 };
        }
    }
    AttentionMasks { k, vertex_count: v, am: raw, mass }
}

/// `input_k = diag(AM_k) (x - xhat0)`.
pub fn route_residuals(x: &[f64], xhat0: &[f64], am: &AttentionMasks) -> Vec<Vec<f64>> {
    let res: Vec<f64> = x.iter().zip(xhat0).map(|(a, b)| a - b).collect();
    route(&res, am)
}

pub(crate) fn route(res: &[f64], am: &AttentionMasks) -> Vec<Vec<f64>> {
    (0..am.k)
        .map(|k| {
            let w = am.row(k);
            res.iter().enumerate().map(|(p, r)| w[p / MU] * r).collect()
        })
        .collect()
}

/// A trained (or training) two-level model with everything needed to decode
/// and reconstruct meshes.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedParams {
    pub config: TrainConfig,
    pub ae0: AEBlockParams,
    pub second: Vec<AEBlockParams>,
    pub scaler: FeatureScaler,
    pub reference: TriangleMesh,
}

impl StackedParams {
    pub fn init(config: &TrainConfig, reference: &TriangleMesh, scaler: FeatureScaler) -> Self {
        let v = reference.vertex_count();
        let ae0 = AEBlockParams::random(config.kz0, v, config.d1, derive_seed(config.seed, 0));
        let second = (0..config.second_count())
            .map(|k| AEBlockParams::random(config.kz1, v, config.d2, derive_seed(config.seed, k as u64 + 1)))
            .collect();
        Self { config: config.clone(), ae0, second, scaler, reference: reference.clone() }
    }

    pub fn vertex_count(&self) -> usize {
        self.reference.vertex_count()
    }

    pub fn graph(&self) -> Graph {
        Graph::new(&Adjacency::build(&self.reference))
    }

    pub fn attention(&self) -> AttentionMasks {
        if self.config.attention {
            extract_attention(&self.ae0)
        } else {
            AttentionMasks::uniform(self.second.len(), self.vertex_count())
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &AEBlockParams> {
        std::iter::once(&self.ae0).chain(self.second.iter())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut AEBlockParams> {
        std::iter::once(&mut self.ae0).chain(self.second.iter_mut())
    }
}

/// Stream-splitting for per-block seeds.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(stream)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullOutput {
    pub xhat0: Vec<f64>,
    pub xhat_k: Vec<Vec<f64>>,
    pub total: Vec<f64>,
}

/// `xhat_total = xhat0 + sum_k xhat_k`.
pub fn forward_full(model: &StackedParams, x: &[f64], graph: &Graph) -> FullOutput {
    let c0 = ae_forward(&model.ae0, x, graph);
    let mut total = c0.xhat.clone();
    let mut xhat_k = Vec::with_capacity(model.second.len());
    if !model.second.is_empty() {
        let am = model.attention();
        for (ae, input) in model.second.iter().zip(route_residuals(x, &c0.xhat, &am)) {
            let out = ae_forward(ae, &input, graph).xhat;
            for (t, o) in total.iter_mut().zip(&out) {
                *t += o;
            }
            xhat_k.push(out);
        }
    }
    FullOutput { xhat0: c0.xhat, xhat_k, total }
}

/// Reconstruction of a scaled feature by the full model.
pub fn reconstruct_feature(model: &StackedParams, feature: &AcapFeature, graph: &Graph) -> AcapFeature {
    let x: Vec<f64> = feature.flat().collect();
    let out = forward_full(model, &x, graph).total;
    AcapFeature::new(out.chunks_exact(MU).map(|r| r.try_into().expect("MU chunk")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_rules() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig { d1: 0.2, d2: 0.4, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { theta: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { d1: 0.2, d2: 0.4, second_level: false, ..TrainConfig::default() }.validate().is_ok());
    }

    #[test]
    fn attention_arithmetic() {
        let mut ae = AEBlockParams::zeros(2, 1, 0.4);
        ae.c[0] = 1.0;
        ae.c[MU] = 3f64.sqrt();
        let am = extract_attention(&ae);
        assert!((am.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((am.get(1, 0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_c_is_uniform() {
        let am = extract_attention(&AEBlockParams::zeros(4, 6, 0.4));
        assert!(am.am.iter().all(|&w| w == 0.25));
    }

    #[test]
    fn random_columns_sum_to_one() {
        let ae = AEBlockParams::random(7, 20, 0.4, 3);
        let am = extract_attention(&ae);
        for i in 0..20 {
            assert!((am.column_sum(i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn routing_partitions_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = 15;
        let x: Vec<f64> = (0..v * MU).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xh: Vec<f64> = (0..v * MU).map(|_| rng.random_range(-1.0..1.0)).collect();
        let am = extract_attention(&AEBlockParams::random(4, v, 0.4, 5));
        let routed = route_residuals(&x, &xh, &am);
        for p in 0..v * MU {
            let s: f64 = routed.iter().map(|r| r[p]).sum();
            assert!((s - (x[p] - xh[p])).abs() < 1e-12);
        }
        assert!(route_residuals(&x, &x, &am).iter().all(|r| r.iter().all(|&v| v == 0.0)));
        let one = extract_attention(&AEBlockParams::random(1, v, 0.4, 5));
        assert_eq!(route_residuals(&x, &xh, &one)[0], x.iter().zip(&xh).map(|(a, b)| a - b).collect::<Vec<_>>());
    }
}
