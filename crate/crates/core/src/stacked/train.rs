use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{derive_seed, route, AttentionMasks, StackedParams, TrainConfig, TrainingStrategy};
use crate::acap::{AcapFeature, FeatureScaler, MU};
use crate::error::{ConfigError, MeshError};
use crate::mesh::{GeodesicCache, TriangleMesh};
use crate::network::{
    add_sparsity_grad, ae_backward, ae_forward, nontrivial_grads, nontrivial_term, recon_term, sparsity_term,
    update_sparsity_mask, AdamState, AeCache, AeGradients, Graph, LossParts,
};

/// Samples per parallel work unit. Partial gradients are summed in chunk
/// order, so results do not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("{0}")]
    Data(String),
    #[error("non-finite loss at step {step}{}", last_finite_note(.last))]
    NonFinite { step: u64, last: Option<LogEntry> },
}

fn last_finite_note(last: &Option<LogEntry>) -> String {
    match last {
        Some(e) => format!(
            " (last finite: step {}, total {:e}, recon0 {:e}, recon_second {:e})",
            e.step, e.total, e.parts0.recon, e.parts_second.recon
        ),
        None => " (no finite step recorded)".into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub epoch: usize,
    pub parts0: LossParts,
    /// Summed over all second-level blocks.
    pub parts_second: LossParts,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str =
        "step,recon0,sparsity0,nontrivial0,recon_second,sparsity_second,nontrivial_second,total";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                e.step,
                e.parts0.recon,
                e.parts0.sparsity,
                e.parts0.nontrivial,
                e.parts_second.recon,
                e.parts_second.sparsity,
                e.parts_second.nontrivial,
                e.total
            ));
        }
        s
    }

    pub fn last(&self) -> Option<&LogEntry> {
        self.entries.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedGradients {
    pub ae0: AeGradients,
    pub second: Vec<AeGradients>,
}

impl StackedGradients {
    fn zeros(model: &StackedParams) -> Self {
        Self { ae0: model.ae0.grad_zeros(), second: model.second.iter().map(|a| a.grad_zeros()).collect() }
    }

    fn add_assign(&mut self, o: &Self) {
        self.ae0.add_assign(&o.ae0);
        for (a, b) in self.second.iter_mut().zip(&o.second) {
            a.add_assign(b);
        }
    }
}

/// What an observer sees after the forward pass of each step.
pub struct StepInfo<'a> {
    pub step: u64,
    pub model: &'a StackedParams,
    pub geodesics: &'a GeodesicCache,
    /// `None` while the second level is inactive.
    pub attention: Option<&'a AttentionMasks>,
    pub batch: &'a [&'a [f64]],
    pub residuals: Vec<&'a [f64]>,
    pub routed: Vec<&'a [Vec<f64>]>,
}

struct SampleForward {
    c0: AeCache,
    res: Vec<f64>,
    inputs: Vec<Vec<f64>>,
    ck: Vec<AeCache>,
}

fn forward_batch(
    model: &StackedParams,
    graph: &Graph,
    am: Option<&AttentionMasks>,
    batch: &[&[f64]],
) -> Vec<SampleForward> {
    batch
        .par_iter()
        .map(|x| {
            let c0 = ae_forward(&model.ae0, x, graph);
            let Some(am) = am else {
                return SampleForward { c0, res: Vec::new(), inputs: Vec::new(), ck: Vec::new() };
            };
            let res: Vec<f64> = x.iter().zip(&c0.xhat).map(|(a, b)| a - b).collect();
            let inputs = route(&res, am);
            let ck = model.second.iter().zip(&inputs).map(|(ae, inp)| ae_forward(ae, inp, graph)).collect();
            SampleForward { c0, res, inputs, ck }
        })
        .collect()
}

struct Evaluated {
    total: f64,
    parts0: LossParts,
    parts_second: LossParts,
    dz0: Vec<Vec<f64>>,
    dzk: Vec<Vec<Vec<f64>>>,
}

fn evaluate(model: &StackedParams, batch: &[&[f64]], fw: &[SampleForward], second_active: bool) -> Evaluated {
    let w = model.config.loss_weights();
    let xhats: Vec<&[f64]> = fw.iter().map(|f| f.c0.xhat.as_slice()).collect();
    let z0: Vec<&[f64]> = fw.iter().map(|f| f.c0.z.as_slice()).collect();
    let parts0 = LossParts {
        recon: recon_term(batch, &xhats),
        sparsity: sparsity_term(&model.ae0),
        nontrivial: nontrivial_term(&z0, model.ae0.kz, w.theta),
    };
    let dz0 = nontrivial_grads(&z0, model.ae0.kz, w.theta);
    let mut parts_second = LossParts::default();
    let mut total = parts0.total(&w);
    let mut dzk = Vec::new();
    if second_active {
        for (k, ae) in model.second.iter().enumerate() {
            let inputs: Vec<&[f64]> = fw.iter().map(|f| f.inputs[k].as_slice()).collect();
            let outs: Vec<&[f64]> = fw.iter().map(|f| f.ck[k].xhat.as_slice()).collect();
            let zs: Vec<&[f64]> = fw.iter().map(|f| f.ck[k].z.as_slice()).collect();
            let p = LossParts {
                recon: recon_term(&inputs, &outs),
                sparsity: sparsity_term(ae),
                nontrivial: nontrivial_term(&zs, ae.kz, w.theta),
            };
            total += p.total(&w);
            parts_second.add(&p);
            dzk.push(nontrivial_grads(&zs, ae.kz, w.theta));
        }
    }
    Evaluated { total, parts0, parts_second, dz0, dzk }
}

struct ChunkAcc {
    grads: StackedGradients,
    dam: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn backward_batch(
    model: &StackedParams,
    graph: &Graph,
    am: Option<&AttentionMasks>,
    batch: &[&[f64]],
    fw: &[SampleForward],
    ev: &Evaluated,
    stop_gradient: bool,
) -> StackedGradients {
    let w = model.config.loss_weights();
    let scale = 2.0 * w.lambda1 / batch.len().max(1) as f64;
    let v = model.vertex_count();
    let k_count = model.second.len();
    let indices: Vec<usize> = (0..batch.len()).collect();
    let partials: Vec<ChunkAcc> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = ChunkAcc { grads: StackedGradients::zeros(model), dam: vec![0.0; k_count * v] };
            for &n in chunk {
                let f = &fw[n];
                let x = batch[n];
                let mut dres = vec![0.0; x.len()];
                if let Some(am) = am {
                    for k in 0..k_count {
                        let ck = &f.ck[k];
                        let input = &f.inputs[k];
                        let dxhat: Vec<f64> = ck.xhat.iter().zip(input).map(|(y, t)| scale * (y - t)).collect();
                        let dx = ae_backward(
                            &model.second[k],
                            graph,
                            ck,
                            &dxhat,
                            Some(&ev.dzk[k][n]),
                            &mut acc.grads.second[k],
                            !stop_gradient,
                        );
                        let Some(dx) = dx else { continue };
                        let row = am.row(k);
                        for (p, (d, t)) in dx.iter().zip(&dxhat).enumerate() {
                            let dinput = d - t;
                            dres[p] += row[p / MU] * dinput;
                            acc.dam[k * v + p / MU] += dinput * f.res[p];
                        }
                    }
                }
                let dxhat0: Vec<f64> =
                    f.c0.xhat.iter().zip(x).zip(&dres).map(|((y, t), r)| scale * (y - t) - r).collect();
                ae_backward(&model.ae0, graph, &f.c0, &dxhat0, Some(&ev.dz0[n]), &mut acc.grads.ae0, false);
            }
            acc
        })
        .collect();
    let mut grads = StackedGradients::zeros(model);
    let mut dam = vec![0.0; k_count * v];
    for p in &partials {
        grads.add_assign(&p.grads);
        for (a, b) in dam.iter_mut().zip(&p.dam) {
            *a += b;
        }
    }
    if let Some(am) = am {
        if model.config.attention && !stop_gradient && k_count > 0 {
            attention_backward(model, am, &dam, &mut grads.ae0.c);
        }
    }
    add_sparsity_grad(&model.ae0, w.lambda2, &mut grads.ae0.c);
    if am.is_some() {
        for (ae, g) in model.second.iter().zip(&mut grads.second) {
            add_sparsity_grad(ae, w.lambda2, &mut g.c);
        }
    }
    grads
}

/// Chain rule from `dL/dAM` through the column normalization and squared
/// group norms into `C0`. Uniform-fallback columns carry no gradient.
fn attention_backward(model: &StackedParams, am: &AttentionMasks, dam: &[f64], grad_c0: &mut [f64]) {
    let (k_count, v) = (am.k, am.vertex_count);
    let width = v * MU;
    for i in 0..v {
        let s = am.mass[i];
        if s <= 0.0 {
            continue;
        }
        let t: f64 = (0..k_count).map(|k| dam[k * v + i] * am.get(k, i)).sum();
        for l in 0..k_count {
            let draw = (dam[l * v + i] - t) / s;
            if draw == 0.0 {
                continue;
            }
            let base = l * width + i * MU;
            for j in 0..MU {
                grad_c0[base + j] += 2.0 * model.ae0.c[base + j] * draw;
            }
        }
    }
}

fn active_attention(model: &StackedParams, second_active: bool) -> Option<AttentionMasks> {
    (second_active && !model.second.is_empty()).then(|| model.attention())
}

/// Total stacked loss on `batch` with the model's current centers and masks.
pub fn stacked_loss(model: &StackedParams, graph: &Graph, batch: &[&[f64]]) -> (f64, LossParts, LossParts) {
    let am = active_attention(model, true);
    let fw = forward_batch(model, graph, am.as_ref(), batch);
    let ev = evaluate(model, batch, &fw, am.is_some());
    (ev.total, ev.parts0, ev.parts_second)
}

/// Analytic gradient of [`stacked_loss`] with masks and centers held fixed.
pub fn stacked_gradients(model: &StackedParams, graph: &Graph, batch: &[&[f64]]) -> (f64, StackedGradients) {
    let am = active_attention(model, true);
    let fw = forward_batch(model, graph, am.as_ref(), batch);
    let ev = evaluate(model, batch, &fw, am.is_some());
    let g = backward_batch(model, graph, am.as_ref(), batch, &fw, &ev, model.config.stop_gradient_through_residual);
    (ev.total, g)
}

/// Trains with the configured strategy. See [`train_with_observer`].
pub fn train_joint(
    features: &[AcapFeature],
    reference: &TriangleMesh,
    scaler: &FeatureScaler,
    config: &TrainConfig,
) -> Result<(StackedParams, TrainLog), TrainError> {
    train_with_observer(features, reference, scaler, config, |_| {})
}

struct Phase {
    epochs: usize,
    second_active: bool,
    train_first: bool,
    stop_gradient: bool,
}

/// Runs ADAM over shuffled mini-batches, calling `observer` after every
/// forward pass.
pub fn train_with_observer(
    features: &[AcapFeature],
    reference: &TriangleMesh,
    scaler: &FeatureScaler,
    config: &TrainConfig,
    mut observer: impl FnMut(&StepInfo),
) -> Result<(StackedParams, TrainLog), TrainError> {
    config.validate()?;
    if features.len() < 2 {
        return Err(TrainError::Data(format!("need at least 2 training shapes, got {}", features.len())));
    }
    let v = reference.vertex_count();
    if let Some(f) = features.iter().find(|f| f.vertex_count() != v) {
        return Err(TrainError::Data(format!("feature has {} vertices, reference has {v}", f.vertex_count())));
    }
    let data: Vec<Vec<f64>> = features.iter().map(|f| f.flat().collect()).collect();
    let mut model = StackedParams::init(config, reference, *scaler);
    let graph = model.graph();
    let geo = GeodesicCache::new(reference)?;
    for ae in model.blocks_mut() {
        update_sparsity_mask(ae, &geo);
    }
    let adam = config.adam();
    let mut opt0 = AdamState::new(adam, model.ae0.tensors().map(<[f64]>::len));
    let mut opt_k: Vec<AdamState> =
        model.second.iter().map(|ae| AdamState::new(adam, ae.tensors().map(<[f64]>::len))).collect();

    let phases = match config.strategy {
        TrainingStrategy::Joint => vec![Phase {
            epochs: config.epochs,
            second_active: config.second_level,
            train_first: true,
            stop_gradient: config.stop_gradient_through_residual,
        }],
        TrainingStrategy::Separate => vec![
            Phase { epochs: config.epochs, second_active: false, train_first: true, stop_gradient: true },
            Phase { epochs: config.epochs, second_active: true, train_first: false, stop_gradient: true },
        ],
    };

    let batch_size = config.batch_size.min(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let mut step: u64 = 0;
    let mut epoch = 0usize;
    for phase in &phases {
        for _ in 0..phase.epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(batch_size) {
                if step > 0 && step % config.center_update_every as u64 == 0 {
                    for ae in model.blocks_mut() {
                        update_sparsity_mask(ae, &geo);
                    }
                }
                let batch: Vec<&[f64]> = idx.iter().map(|&i| data[i].as_slice()).collect();
                let am = active_attention(&model, phase.second_active);
                let fw = forward_batch(&model, &graph, am.as_ref(), &batch);
                let ev = evaluate(&model, &batch, &fw, am.is_some());
                if !ev.total.is_finite() {
                    return Err(TrainError::NonFinite { step, last: log.last().copied() });
                }
                observer(&StepInfo {
                    step,
                    model: &model,
                    geodesics: &geo,
                    attention: am.as_ref(),
                    batch: &batch,
                    residuals: fw.iter().map(|f| f.res.as_slice()).collect(),
                    routed: fw.iter().map(|f| f.inputs.as_slice()).collect(),
                });
                let grads = backward_batch(&model, &graph, am.as_ref(), &batch, &fw, &ev, phase.stop_gradient);
                if phase.train_first {
                    opt0.update(&mut model.ae0.tensors_mut(), &grads.ae0.tensors());
                }
                if am.is_some() {
                    for ((ae, g), opt) in model.second.iter_mut().zip(&grads.second).zip(&mut opt_k) {
                        opt.update(&mut ae.tensors_mut(), &g.tensors());
                    }
                }
                log.entries.push(LogEntry {
                    step,
                    epoch,
                    parts0: ev.parts0,
                    parts_second: ev.parts_second,
                    total: ev.total,
                });
                step += 1;
            }
            epoch += 1;
        }
    }
    for ae in model.blocks_mut() {
        update_sparsity_mask(ae, &geo);
    }
    Ok((model, log))
}
