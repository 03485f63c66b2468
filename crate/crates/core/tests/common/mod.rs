#![allow(dead_code)]

pub mod oracles;

use meshmodes::datagen::{gen_bar_dataset, BarDataset, BarSpec};
use meshmodes::mesh::{GeodesicCache, TriangleMesh, Vec3};
use meshmodes::network::{update_sparsity_mask, Graph};
use meshmodes::stacked::{stacked_gradients, stacked_loss, StackedParams, TrainConfig};
use meshmodes::{encode_dataset, AcapFeature, FeatureScaler, MU};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn icosahedron() -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let p = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ];
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    TriangleMesh::new(p.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect(), faces)
}

pub fn perturbed(base: &[TriangleMesh], rng: &mut ChaCha8Rng, amp: f64) -> Vec<TriangleMesh> {
    base.iter()
        .map(|m| TriangleMesh {
            positions: m
                .positions
                .iter()
                .map(|p| {
                    p + Vec3::new(rng.random_range(-amp..amp), rng.random_range(-amp..amp), rng.random_range(-amp..amp))
                })
                .collect(),
            ..m.clone()
        })
        .collect()
}

pub fn random_features(rng: &mut ChaCha8Rng, n: usize, v: usize) -> Vec<AcapFeature> {
    (0..n)
        .map(|_| AcapFeature::new((0..v).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()))
        .collect()
}

/// Ground/reconstruction pairs for checking metrics against the oracles.
pub struct MetricInstance {
    pub ground: Vec<TriangleMesh>,
    pub recon: Vec<TriangleMesh>,
    pub x: Vec<AcapFeature>,
    pub xhat: Vec<AcapFeature>,
}

/// A random run of consecutive shapes from `meshes`, jittered, with a noisier
/// copy as the reconstruction and random features of matching count.
pub fn metric_instance(meshes: &[TriangleMesh], seed: u64) -> MetricInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..6usize);
    let start = rng.random_range(0..meshes.len() - n);
    let ground = perturbed(&meshes[start..start + n], &mut rng, 0.05);
    let recon = perturbed(&ground, &mut rng, 0.02);
    let x = random_features(&mut rng, n, 20);
    let xhat = random_features(&mut rng, n, 20);
    MetricInstance { ground, recon, x, xhat }
}

/// A coarse bar family that trains in seconds.
pub fn small_spec() -> BarSpec {
    BarSpec { segments: 12, ring_vertices: 8, ..BarSpec::default() }
}

pub struct SmallSet {
    pub data: BarDataset,
    pub features: Vec<AcapFeature>,
    pub scaler: FeatureScaler,
}

impl SmallSet {
    pub fn new(n: usize) -> Self {
        let data = gen_bar_dataset(&small_spec(), n).unwrap();
        let enc = encode_dataset(&data.meshes, 0).unwrap();
        Self { data, features: enc.features, scaler: enc.scaler }
    }

    pub fn reference(&self) -> &TriangleMesh {
        &self.data.meshes[0]
    }

    pub fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig { epochs, seed, kz0: 4, kz1: 3, ..TrainConfig::default() }
    }
}

pub struct Instance {
    pub model: StackedParams,
    pub graph: Graph,
    pub batch: Vec<Vec<f64>>,
}

/// A random two-level model on the icosahedron with weights large enough
/// that every nonlinearity and the latent hinge are exercised.
pub fn random_instance(seed: u64, kz: [usize; 2], samples: usize) -> Instance {
    let mesh = icosahedron();
    let config = TrainConfig { kz0: kz[0], kz1: kz[1], theta: 0.3, seed, ..TrainConfig::default() };
    let mut model = StackedParams::init(&config, &mesh, FeatureScaler::fit(std::iter::empty()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    for ae in model.blocks_mut() {
        for (t, scale) in ae.tensors_mut().into_iter().zip([0.4, 0.4, 0.3, 0.25, 0.4, 0.4, 0.3]) {
            for v in t.iter_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }
    let geo = GeodesicCache::new(&mesh).unwrap();
    for ae in model.blocks_mut() {
        update_sparsity_mask(ae, &geo);
    }
    let v = mesh.vertex_count();
    let batch = (0..samples).map(|_| (0..v * MU).map(|_| rng.random_range(-0.95..0.95)).collect()).collect();
    let graph = model.graph();
    Instance { model, graph, batch }
}

/// One parameter's analytic derivative, its central difference, and the
/// rounding bound `eps * max|L(+h)|,|L(-h)| / h` of that difference.
#[derive(Debug, Clone, Copy)]
pub struct FdEntry {
    pub analytic: f64,
    pub numeric: f64,
    pub rounding: f64,
}

/// Multiple of the rounding bound granted on top of the relative tolerance.
pub const ROUNDING_ALLOWANCE: f64 = 4.0;

impl FdEntry {
    pub fn relative(&self) -> f64 {
        let d = self.analytic.abs().max(self.numeric.abs());
        if d == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / d
        }
    }

    pub fn passes(&self, rtol: f64) -> bool {
        (self.analytic - self.numeric).abs()
            <= rtol * self.analytic.abs().max(self.numeric.abs()) + ROUNDING_ALLOWANCE * self.rounding
    }
}

/// Central differences of the stacked loss for every parameter of every block.
pub fn finite_difference_entries(inst: &Instance, h: f64) -> Vec<FdEntry> {
    let batch: Vec<&[f64]> = inst.batch.iter().map(Vec::as_slice).collect();
    let (_, grads) = stacked_gradients(&inst.model, &inst.graph, &batch);
    let analytic: Vec<Vec<f64>> =
        std::iter::once(&grads.ae0).chain(&grads.second).flat_map(|g| g.tensors().map(<[f64]>::to_vec)).collect();
    let mut model = inst.model.clone();
    let mut out = Vec::new();
    for b in 0..1 + model.second.len() {
        for t in 0..7 {
            let len = block(&mut model, b).tensors_mut()[t].len();
            for e in 0..len {
                let orig = block(&mut model, b).tensors_mut()[t][e];
                block(&mut model, b).tensors_mut()[t][e] = orig + h;
                let plus = stacked_loss(&model, &inst.graph, &batch).0;
                block(&mut model, b).tensors_mut()[t][e] = orig - h;
                let minus = stacked_loss(&model, &inst.graph, &batch).0;
                block(&mut model, b).tensors_mut()[t][e] = orig;
                out.push(FdEntry {
                    analytic: analytic[b * 7 + t][e],
                    numeric: (plus - minus) / (2.0 * h),
                    rounding: f64::EPSILON * plus.abs().max(minus.abs()) / h,
                });
            }
        }
    }
    out
}

fn block(model: &mut StackedParams, b: usize) -> &mut meshmodes::network::AEBlockParams {
    if b == 0 {
        &mut model.ae0
    } else {
        &mut model.second[b - 1]
    }
}
