//! Weakly supervised training of the consensus network.
//!
//! The loss of a labelled pair is `L = -y (s̄A + s̄B)` where `s̄B` is the mean
//! over A's cells of the largest softmax score in B, and `s̄A` the same in
//! the other direction. Gradients are derived by hand through the whole
//! matching pipeline; the feature maps are constants.

mod adam;
mod gradcheck;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{
    finite_diff_check, finite_diff_check_against, oracle_loss, GradCheckReport, LayerCheck,
    Tolerance,
};

use crate::correlation::{correlate, CorrTensor};
use crate::error::{NcError, Result};
use crate::features::{Label, TrainSample};
use crate::matchfilter::{soft_mnn_backward, soft_mutual_nn};
use crate::ncnet::{
    conv4d_input_grad, conv4d_param_grad, init_params_with, ncnet_symmetric_traced, ForwardTrace,
    InitScheme, NcNetParams, NetConfig,
};
use crate::tensor4::{ArgmaxGrid, Pair, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub loss: f32,
    pub sbar_a: f32,
    pub sbar_b: f32,
    pub label: Label,
}

/// Per-layer parameter gradients, congruent with [`NcNetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Gradients {
    pub fn zeros_like(p: &NcNetParams) -> Self {
        Self {
            layers: p
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn congruent(&self, p: &NcNetParams) -> bool {
        self.layers.len() == p.layers.len()
            && self
                .layers
                .iter()
                .zip(&p.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
    }
}

/// Intermediates kept by [`forward_pipeline`] for the backward pass.
#[derive(Debug, Clone)]
pub struct PipelineCache {
    label: Label,
    /// consensus output before the second gating
    nc: Tensor4,
    fwd: ForwardTrace,
    rev: ForwardTrace,
    sa: Tensor4,
    sb: Tensor4,
    /// per B cell, best A cell under sA
    arg_a: ArgmaxGrid,
    /// per A cell, best B cell under sB
    arg_b: ArgmaxGrid,
}

/// Full matching pipeline plus the weak loss.
pub fn forward_pipeline(
    sample: &TrainSample,
    params: &NcNetParams,
) -> Result<(CorrTensor, LossRecord, PipelineCache)> {
    let c = correlate(&sample.fa, &sample.fb)?;
    let gated = soft_mutual_nn(&c);
    forward_from_gated(&gated, sample.label, params)
}

/// Pipeline from the first gated volume onwards. The first gating has no
/// parameters upstream, so callers iterating over a fixed dataset may
/// compute it once.
pub fn forward_from_gated(
    gated: &CorrTensor,
    label: Label,
    params: &NcNetParams,
) -> Result<(CorrTensor, LossRecord, PipelineCache)> {
    let (nc, fwd, rev) = ncnet_symmetric_traced(gated, params)?;
    let fin = soft_mutual_nn(&nc);
    let t = fin.tensor();
    let sa = t.softmax_over_pair(Pair::First)?;
    let sb = t.softmax_over_pair(Pair::Second)?;
    let (max_a, arg_a) = sa.max_over_pair(Pair::First)?;
    let (max_b, arg_b) = sb.max_over_pair(Pair::Second)?;
    let sbar_a = mean(max_a.data());
    let sbar_b = mean(max_b.data());
    let loss = -label.sign() * (sbar_a + sbar_b);
    let record = LossRecord {
        loss,
        sbar_a,
        sbar_b,
        label,
    };
    let cache = PipelineCache {
        label,
        nc: nc.into_tensor(),
        fwd,
        rev,
        sa,
        sb,
        arg_a,
        arg_b,
    };
    Ok((fin, record, cache))
}

fn mean(xs: &[f32]) -> f32 {
    xs.iter().sum::<f32>() / xs.len() as f32
}

/// Reverse-mode gradient of the loss with respect to every weight and bias.
///
/// The hard-assignment indices and the argmax entries of every slice
/// maximum are those of the cached forward pass.
pub fn backward_pipeline(cache: Option<&PipelineCache>, params: &NcNetParams) -> Result<Gradients> {
    let cache = cache.ok_or(NcError::MissingCache)?;
    let y = cache.label.sign();
    let [d1, d2, d3, d4] = cache.sb.dims();
    let a = d1 * d2;
    let b = d3 * d4;

    // dL / d(final volume) through both softmaxes
    let mut g = vec![0.0f32; a * b];
    let coef_b = -y / a as f32;
    let sb = cache.sb.data();
    for p in 0..a {
        let row = &sb[p * b..(p + 1) * b];
        let q = cache.arg_b.index[p];
        let s_q = row[q];
        let gr = &mut g[p * b..(p + 1) * b];
        for m in 0..b {
            gr[m] -= coef_b * s_q * row[m];
        }
        gr[q] += coef_b * s_q;
    }
    let coef_a = -y / b as f32;
    let sa = cache.sa.data();
    for q in 0..b {
        let p_best = cache.arg_a.index[q];
        let s_p = sa[p_best * b + q];
        for p in 0..a {
            g[p * b + q] -= coef_a * s_p * sa[p * b + q];
        }
        g[p_best * b + q] += coef_a * s_p;
    }
    let g_final = Tensor4::from_vec(1, cache.sb.dims(), g)?;

    // second gating
    let g_nc = soft_mnn_backward(&cache.nc, &g_final);

    // nc = N(x) + N(xᵀ)ᵀ
    let mut grads = Gradients::zeros_like(params);
    net_backward(&cache.fwd, g_nc.clone(), params, &mut grads);
    net_backward(&cache.rev, g_nc.transpose_pairs(), params, &mut grads);
    Ok(grads)
}

fn net_backward(trace: &ForwardTrace, mut g: Tensor4, params: &NcNetParams, grads: &mut Gradients) {
    let last = params.layers.len() - 1;
    for n in (0..params.layers.len()).rev() {
        if n < last || params.config.final_relu {
            let act = &trace.acts[n + 1];
            for (gv, &v) in g.data_mut().iter_mut().zip(act.data()) {
                if v <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let layer = &params.layers[n];
        let lg = &mut grads.layers[n];
        conv4d_param_grad(&trace.acts[n], &g, layer, &mut lg.weights, &mut lg.bias);
        if n > 0 {
            g = conv4d_input_grad(&g, layer);
        }
    }
}

/// Loss and gradients of one sample.
pub fn loss_and_grad(
    sample: &TrainSample,
    params: &NcNetParams,
) -> Result<(LossRecord, Gradients)> {
    let (_, rec, cache) = forward_pipeline(sample, params)?;
    let grads = backward_pipeline(Some(&cache), params)?;
    Ok((rec, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
    pub net: NetConfig,
    pub init: InitScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 5e-4,
            seed: 0,
            net: NetConfig::INSTANCE,
            init: InitScheme::default(),
        }
    }
}

/// One row of the loss log. Epoch 0 is the untrained network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NcNetParams,
    pub log: Vec<EpochLog>,
}

struct Prepared {
    gated: CorrTensor,
    label: Label,
}

fn prepare(samples: &[TrainSample]) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                gated: soft_mutual_nn(&correlate(&s.fa, &s.fb)?),
                label: s.label,
            })
        })
        .collect()
}

fn mean_loss(set: &[Prepared], params: &NcNetParams) -> Result<f64> {
    let mut total = 0f64;
    for s in set {
        total += forward_from_gated(&s.gated, s.label, params)?.1.loss as f64;
    }
    Ok(total / set.len() as f64)
}

/// Single-sample Adam steps over a shuffled dataset, starting from
/// [`init_params_with`] under `config.seed` and `config.init`.
pub fn train(
    dataset: &[TrainSample],
    validation: &[TrainSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let params = init_params_with(config.net, config.seed, config.init)?;
    train_from(params, dataset, validation, config)
}

pub fn train_from(
    mut params: NcNetParams,
    dataset: &[TrainSample],
    validation: &[TrainSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(NcError::Dataset("empty training set".into()));
    }
    let pos = dataset
        .iter()
        .filter(|s| s.label == Label::Positive)
        .count();
    if pos == 0 || pos == dataset.len() {
        return Err(NcError::Dataset(format!(
            "training set needs both labels, got {pos} positive of {}",
            dataset.len()
        )));
    }
    let train_set = prepare(dataset)?;
    let val_set = prepare(validation)?;
    let val = |p: &NcNetParams| -> Result<Option<f64>> {
        if val_set.is_empty() {
            Ok(None)
        } else {
            mean_loss(&val_set, p).map(Some)
        }
    };

    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: mean_loss(&train_set, &params)?,
        val_loss: val(&params)?,
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(&params, config.lr);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut losses = vec![0f64; train_set.len()];
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for &n in &order {
            let s = &train_set[n];
            let (_, rec, cache) = forward_from_gated(&s.gated, s.label, &params)?;
            let grads = backward_pipeline(Some(&cache), &params)?;
            adam_step(&mut params, &grads, &mut adam)?;
            losses[n] = rec.loss as f64;
        }
        // summed in dataset order so the log does not depend on the shuffle
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss: val(&params)?,
        });
    }
    Ok(TrainOutcome { params, log })
}

/// `epoch,mean_train_loss,mean_val_loss`; the last column is empty without
/// a validation set.
pub fn write_loss_csv(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("epoch,mean_train_loss,mean_val_loss\n");
    for e in log {
        let val = e.val_loss.map(|v| format!("{v:.8}")).unwrap_or_default();
        out.push_str(&format!("{},{:.8},{}\n", e.epoch, e.train_loss, val));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
