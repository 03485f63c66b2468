mod common;

use common::SmallSet;
use meshmodes::mesh::GeodesicCache;
use meshmodes::network::{update_sparsity_mask, AEBlockParams};
use meshmodes::stacked::{
    checkpoint_components, extract_components, forward_full, load_model, model_to_bytes, save_model, train_joint,
    train_with_observer, ComponentMeta, StackedParams, TrainError, TrainingStrategy,
};
use meshmodes::{AcapFeature, MU};
use proptest::prelude::*;

fn flat(f: &AcapFeature) -> Vec<f64> {
    f.flat().collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn tied_layer_shares_one_matrix() {
    let mut ae = AEBlockParams::random(3, 5, 0.3, 9);
    let h: Vec<f64> = (0..ae.width()).map(|p| ((p * 7) % 11) as f64 / 11.0 - 0.5).collect();
    for k in 0..3 {
        let mut e = vec![0.0; 3];
        e[k] = 1.0;
        assert_eq!(ae.decode_fc(&e), ae.c_row(k));
        let z = ae.encode_fc(&h);
        let expected: f64 = ae.c_row(k).iter().zip(&h).map(|(c, x)| c * x).sum();
        assert!((z[k] - expected).abs() < 1e-15);
    }
    // editing C moves both directions of the layer
    ae.c[0] += 1.0;
    assert_eq!(ae.decode_fc(&[1.0, 0.0, 0.0])[0], ae.c[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn larger_radius_never_adds_penalties(seed in 0u64..1000, d in 0.0..1.0f64, grow in 0.0..0.5f64) {
        let set = common::small_spec();
        let mesh = set.shape(meshmodes::datagen::BarParams { bend_deg: 0.0, bump: 0.0 });
        let geo = GeodesicCache::new(&mesh).unwrap();
        let mut small = AEBlockParams::random(4, mesh.vertex_count(), d, seed);
        update_sparsity_mask(&mut small, &geo);
        let mut large = small.clone();
        large.radius = d + grow;
        large.update_mask(&geo);
        prop_assert_eq!(&small.centers, &large.centers);
        for (a, b) in small.mask.iter().zip(&large.mask) {
            prop_assert!(b <= a);
        }
    }
}

#[test]
fn loss_halves_within_200_steps() {
    let set = SmallSet::new(12);
    let batch: Vec<AcapFeature> = set.features[1..5].to_vec();
    let mut passed = 0;
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let cfg = set.train_config(200, seed);
        let (_, log) = train_joint(&batch, set.reference(), &set.scaler, &cfg).unwrap();
        assert_eq!(log.entries.len(), 200);
        let ratio = log.entries.last().unwrap().total / log.entries[0].total;
        ratios.push(ratio);
        passed += usize::from(ratio <= 0.5);
    }
    assert!(passed >= 4, "final/initial loss ratios {ratios:?}");
}

#[test]
fn single_shape_overfits() {
    let set = SmallSet::new(50);
    let cfg = meshmodes::stacked::TrainConfig {
        lambda2: 0.0,
        second_level: false,
        epochs: 2000,
        ..meshmodes::stacked::TrainConfig::default()
    };
    for i in [7, 25, 40] {
        let x = set.features[i].clone();
        let (model, log) = train_joint(&[x.clone(), x.clone()], set.reference(), &set.scaler, &cfg).unwrap();
        let recon = log.entries.last().unwrap().parts0.recon;
        assert!(recon < 1e-4, "shape {i}: recon loss {recon:e}");
        let out = forward_full(&model, &flat(&x), &model.graph());
        assert_eq!(out.total, out.xhat0);
    }
}

#[test]
fn zero_second_level_adds_nothing() {
    let set = SmallSet::new(4);
    let cfg = set.train_config(1, 0);
    let mut model = StackedParams::init(&cfg, set.reference(), set.scaler);
    for ae in &mut model.second {
        *ae = AEBlockParams::zeros(ae.kz, ae.vertex_count, ae.radius);
    }
    let x = flat(&set.features[3]);
    let out = forward_full(&model, &x, &model.graph());
    assert_eq!(out.total, out.xhat0);
    assert!(out.xhat_k.iter().all(|o| o.iter().all(|&v| v == 0.0)));
}

#[test]
fn second_level_reduces_residual_on_two_mode_set() {
    let set = SmallSet::new(20);
    let train: Vec<AcapFeature> = set.features.iter().step_by(2).cloned().collect();
    let cfg = set.train_config(1500, 1);
    let (model, _) = train_joint(&train, set.reference(), &set.scaler, &cfg).unwrap();
    let graph = model.graph();
    let (mut e0, mut et) = (0.0, 0.0);
    for x in &train {
        let x = flat(x);
        let out = forward_full(&model, &x, &graph);
        e0 += dist2(&x, &out.xhat0);
        et += dist2(&x, &out.total);
    }
    assert!(et < e0, "total {et:e} vs first level {e0:e}");
}

#[test]
fn observed_steps_satisfy_routing_invariants() {
    let set = SmallSet::new(12);
    let cfg = set.train_config(40, 2);
    let mut steps = 0;
    train_with_observer(&set.features, set.reference(), &set.scaler, &cfg, |info| {
        steps += 1;
        let am = info.attention.expect("second level active");
        for i in 0..am.vertex_count {
            assert!((am.column_sum(i) - 1.0).abs() <= 1e-9);
        }
        for (res, routed) in info.residuals.iter().zip(&info.routed) {
            for (p, r) in res.iter().enumerate() {
                let s: f64 = routed.iter().map(|input| input[p]).sum();
                assert!((s - r).abs() <= 1e-12);
            }
        }
        for ae in info.model.blocks() {
            let field = |k: usize| info.geodesics.field(ae.centers[k]);
            for k in 0..ae.kz {
                let f = field(k);
                for i in 0..ae.vertex_count {
                    let m = ae.mask[k * ae.vertex_count + i];
                    assert!(m <= 1);
                    assert_eq!(m == 1, f.dist[i] >= ae.radius);
                }
            }
        }
        assert_eq!(info.batch.len(), info.residuals.len());
        assert_eq!(info.batch[0].len(), am.vertex_count * MU);
    })
    .unwrap();
    assert_eq!(steps, 40);
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let set = SmallSet::new(12);
    let cfg = set.train_config(30, 5);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train_joint(&set.features, set.reference(), &set.scaler, &cfg).unwrap())
    };
    let (m1, l1) = run(1);
    let (m2, l2) = run(3);
    assert_eq!(model_to_bytes(&m1), model_to_bytes(&m2));
    assert_eq!(l1.to_csv(), l2.to_csv());
    let (m3, _) = train_joint(&set.features, set.reference(), &set.scaler, &set.train_config(30, 6)).unwrap();
    assert_ne!(model_to_bytes(&m1), model_to_bytes(&m3));
}

#[test]
fn separate_training_freezes_first_level() {
    let set = SmallSet::new(12);
    let base = set.train_config(60, 4);
    let one = meshmodes::stacked::TrainConfig { second_level: false, ..base.clone() };
    let sep = meshmodes::stacked::TrainConfig { strategy: TrainingStrategy::Separate, ..base };
    let (m1, _) = train_joint(&set.features, set.reference(), &set.scaler, &one).unwrap();
    let (m2, log) = train_joint(&set.features, set.reference(), &set.scaler, &sep).unwrap();
    assert_eq!(m1.ae0, m2.ae0);
    assert_eq!(log.entries.len(), 120);
    assert!(log.entries[..60].iter().all(|e| e.parts_second.recon == 0.0));
    assert!(log.entries[60..].iter().any(|e| e.parts_second.recon > 0.0));
}

#[test]
fn non_finite_features_abort_with_diagnostics() {
    let set = SmallSet::new(6);
    let mut features = set.features.clone();
    features[2].rows_mut()[5][1] = f64::NAN;
    let err = train_joint(&features, set.reference(), &set.scaler, &set.train_config(5, 0)).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { step: 0, last: None }), "{err}");
}

#[test]
fn too_few_shapes_rejected() {
    let set = SmallSet::new(3);
    let err = train_joint(&set.features[..1], set.reference(), &set.scaler, &set.train_config(5, 0)).unwrap_err();
    assert!(matches!(err, TrainError::Data(_)));
}

#[test]
fn components_checkpoint_and_pruning() {
    let set = SmallSet::new(20);
    let train: Vec<AcapFeature> = set.features.iter().step_by(2).cloned().collect();
    let cfg = set.train_config(300, 8);
    let (model, _) = train_joint(&train, set.reference(), &set.scaler, &cfg).unwrap();
    let graph = model.graph();
    let comps = extract_components(&model, &graph, cfg.probe_level1, cfg.probe_level2);
    assert_eq!(comps.components.len(), cfg.kz0 + cfg.kz0 * cfg.kz1);
    for c in &comps.components {
        assert_eq!(c.kept, c.strength >= cfg.eps2);
        if c.level == 2 {
            assert_eq!(c.parent, Some(c.ae));
        }
    }
    let zero = extract_components(&model, &graph, 0.0, 0.0);
    assert!(zero.components.iter().all(|c| c.strength == 0.0 && !c.kept));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mdca");
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, model);
    let x = flat(&set.features[5]);
    assert_eq!(forward_full(&back, &x, &graph), forward_full(&model, &x, &graph));
    let metas = checkpoint_components(&std::fs::read(&path).unwrap()).unwrap();
    let expected: Vec<ComponentMeta> = comps.components.iter().map(ComponentMeta::from).collect();
    assert_eq!(metas, expected);
}
