use serde::{Deserialize, Serialize};

use super::StackedParams;
use crate::acap::{AcapFeature, FeatureScaler, MU};
use crate::network::{AEBlockParams, Graph};

/// A vertex belongs to a component's active region when its feature norm
/// exceeds this fraction of the component's largest vertex norm.
pub const REGION_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// 1 for the first-level autoencoder, 2 for the second level.
    pub level: u8,
    /// First-level index a second-level component belongs to.
    pub parent: Option<usize>,
    /// Block index: 0 for level 1, the second-level block for level 2.
    pub ae: usize,
    pub index: usize,
    pub magnitude: f64,
    /// Unscaled ACAP deviation from the identity.
    pub feature: AcapFeature,
    pub strength: f64,
    pub kept: bool,
    pub center: usize,
}

impl Component {
    pub fn region(&self) -> Vec<usize> {
        active_region(&self.feature, REGION_FRACTION)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSet {
    pub components: Vec<Component>,
    pub eps2: f64,
}

impl ComponentSet {
    pub fn level(&self, level: u8) -> impl Iterator<Item = &Component> {
        self.components.iter().filter(move |c| c.level == level)
    }

    pub fn kept(&self) -> impl Iterator<Item = &Component> {
        self.components.iter().filter(|c| c.kept)
    }

    pub fn pruned_count(&self) -> usize {
        self.components.iter().filter(|c| !c.kept).count()
    }

    pub fn find(&self, level: u8, ae: usize, index: usize) -> Option<&Component> {
        self.components.iter().find(|c| c.level == level && c.ae == ae && c.index == index)
    }
}

/// Mean norm over vertices whose feature norm exceeds `eps1`; zero when none does.
pub fn component_strength(delta: &AcapFeature, eps1: f64) -> f64 {
    let (sum, count) = delta
        .rows()
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .filter(|&n| n > eps1)
        .fold((0.0, 0usize), |(s, c), n| (s + n, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Vertices whose feature norm exceeds `fraction` of the largest one.
pub fn active_region(delta: &AcapFeature, fraction: f64) -> Vec<usize> {
    let norms: Vec<f64> = delta.rows().iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Vec::new();
    }
    norms.iter().enumerate().filter(|(_, &n)| n > fraction * max).map(|(i, _)| i).collect()
}

/// `dec(z) - dec(0)` in scaled feature space.
pub fn decode_delta(ae: &AEBlockParams, z: &[f64], graph: &Graph) -> Vec<f64> {
    let on = ae.decode(z, graph);
    let off = ae.decode(&vec![0.0; ae.kz], graph);
    on.iter().zip(&off).map(|(a, b)| a - b).collect()
}

pub(crate) fn unscale_delta(scaled: &[f64], scaler: &FeatureScaler) -> AcapFeature {
    AcapFeature::new(
        scaled.chunks_exact(MU).map(|r| scaler.inverse_delta_row(r.try_into().expect("MU chunk"))).collect(),
    )
}

fn probe(ae: &AEBlockParams, k: usize, magnitude: f64, graph: &Graph, scaler: &FeatureScaler) -> AcapFeature {
    let mut z = vec![0.0; ae.kz];
    z[k] = magnitude;
    unscale_delta(&decode_delta(ae, &z, graph), scaler)
}

/// Decodes every latent direction of every block at the given probe
/// magnitudes and marks components below `eps2` strength as pruned.
pub fn extract_components(model: &StackedParams, graph: &Graph, level1: f64, level2: f64) -> ComponentSet {
    let cfg = &model.config;
    let mut components = Vec::with_capacity(model.ae0.kz * (1 + model.second.len()));
    let mut push = |level: u8, parent: Option<usize>, ae_index: usize, ae: &AEBlockParams, k: usize, m: f64| {
        let feature = probe(ae, k, m, graph, &model.scaler);
        let strength = component_strength(&feature, cfg.eps1);
        components.push(Component {
            level,
            parent,
            ae: ae_index,
            index: k,
            magnitude: m,
            feature,
            strength,
            kept: strength >= cfg.eps2,
            center: ae.centers[k],
        });
    };
    for k in 0..model.ae0.kz {
        push(1, None, 0, &model.ae0, k, level1);
    }
    for (a, ae) in model.second.iter().enumerate() {
        for k in 0..ae.kz {
            push(2, Some(a), a, ae, k, level2);
        }
    }
    ComponentSet { components, eps2: cfg.eps2 }
}

/// Cosine similarity between all first-level components; zero vectors are
/// similar to nothing, themselves included.
pub fn component_similarity(set: &ComponentSet) -> Vec<Vec<f64>> {
    let feats: Vec<Vec<f64>> = set.level(1).map(|c| c.feature.flat().collect()).collect();
    let norms: Vec<f64> = feats.iter().map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    (0..feats.len())
        .map(|a| {
            (0..feats.len())
                .map(|b| {
                    if norms[a] == 0.0 || norms[b] == 0.0 {
                        0.0
                    } else if a == b {
                        1.0
                    } else {
                        feats[a].iter().zip(&feats[b]).map(|(x, y)| x * y).sum::<f64>() / (norms[a] * norms[b])
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMeta {
    pub level: u8,
    pub parent: Option<usize>,
    pub ae: usize,
    pub index: usize,
    pub magnitude: f64,
    pub strength: f64,
    pub kept: bool,
    pub center: usize,
}

impl From<&Component> for ComponentMeta {
    fn from(c: &Component) -> Self {
        Self {
            level: c.level,
            parent: c.parent,
            ae: c.ae,
            index: c.index,
            magnitude: c.magnitude,
            strength: c.strength,
            kept: c.kept,
            center: c.center,
        }
    }
}
