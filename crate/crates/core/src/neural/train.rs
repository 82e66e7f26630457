//! Training a localization network on the scaled bilateral objective.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{pair_loss, pair_loss_grad, Template};
use crate::neural::net::{prepare_input, LocNet};
use crate::optimize::{sharpen, Adam, AdamConfig};
use crate::param::ParamConfig;
use crate::preprocess::augment;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub outer_iterations: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the strided conv stack.
    pub lr_backbone: f64,
    /// Learning rate of every later layer.
    pub lr_head: f64,
    /// Lower bound on the sharpened minimum used in `c_u = 1 / min`.
    pub cu_floor: f64,
    pub seed: u64,
    /// Maximum random translation applied to training halves.
    pub augment_shift: f64,
    /// Refinement used to refresh the example weights.
    pub sharpen: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            outer_iterations: 2,
            epochs: 5,
            batch_size: 8,
            lr_backbone: 1e-5,
            lr_head: 1e-4,
            cu_floor: 1e-3,
            seed: 0,
            augment_shift: 0.02,
            sharpen: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.outer_iterations >= 1
            && self.epochs >= 1
            && self.batch_size >= 1
            && self.lr_backbone > 0.0
            && self.lr_head > 0.0
            && self.cu_floor > 0.0
            && (0.0..=0.1).contains(&self.augment_shift);
        if ok {
            self.sharpen.validate()
        } else {
            Err(Error::InvalidConfig(format!("training {self:?}")))
        }
    }
}

/// Loss summary after one epoch (or before training, with `epoch = 0`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub outer: usize,
    /// 1-based epoch within the outer iteration; 0 marks the initial state.
    pub epoch: usize,
    /// Mean of `f(u, G(u))` over the training pairs.
    pub mean_loss: f64,
    /// Mean of `c_u · f(u, G(u))`.
    pub mean_scaled_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<EpochRecord>,
    /// Example weights in effect at the end.
    pub cu: Vec<f64>,
    /// Set when training stopped early on a non-finite loss; the returned
    /// weights are the last finite ones.
    pub aborted: Option<String>,
}

impl TrainReport {
    pub fn initial(&self) -> Option<&EpochRecord> {
        self.curve.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.curve.last()
    }
}

/// Network outputs of both halves as one 8-vector.
pub fn predict_pair(net: &LocNet, left: &Image, right: &Image) -> Result<[f64; 8]> {
    let l = net.predict(left)?;
    let r = net.predict(right)?;
    Ok([l[0], l[1], l[2], l[3], r[0], r[1], r[2], r[3]])
}

struct Example<'a> {
    left: &'a Image,
    right: &'a Image,
}

/// Loss and weighted parameter gradient of one pair.
fn example_grad(net: &LocNet, left: &Image, right: &Image, t: &Template, pcfg: &ParamConfig, cu: f64) -> Result<(f64, Vec<f64>)> {
    let xl = prepare_input(left, net.arch())?;
    let xr = prepare_input(right, net.arch())?;
    let (vl, cl) = net.forward(&xl)?;
    let (vr, cr) = net.forward(&xr)?;
    let v = [vl[0], vl[1], vl[2], vl[3], vr[0], vr[1], vr[2], vr[3]];
    let (loss, g) = pair_loss_grad(left, right, &v, t, pcfg);
    let up_l = [g[0] * cu, g[1] * cu, g[2] * cu, g[3] * cu];
    let up_r = [g[4] * cu, g[5] * cu, g[6] * cu, g[7] * cu];
    let mut grad = net.backward(&cl, &up_l)?;
    for (a, b) in grad.iter_mut().zip(net.backward(&cr, &up_r)?) {
        *a += b;
    }
    Ok((loss.total, grad))
}

/// Mean parameter gradient of `c_u · f(u, G(u))` over a minibatch, summed
/// in input order.
pub fn minibatch_grad(
    net: &LocNet,
    batch: &[(&Image, &Image, f64)],
    t: &Template,
    pcfg: &ParamConfig,
) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|(l, r, cu)| example_grad(net, l, r, t, pcfg, *cu))
        .collect();
    let n = batch.len() as f64;
    let mut grad = vec![0.0; net.params().len()];
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss / n, grad))
}

fn mean_losses(net: &LocNet, data: &[Example], t: &Template, pcfg: &ParamConfig, cu: &[f64]) -> Result<(f64, f64)> {
    let losses: Vec<Result<f64>> = data
        .par_iter()
        .map(|e| {
            let v = predict_pair(net, e.left, e.right)?;
            Ok(pair_loss(e.left, e.right, &v, t, pcfg).total)
        })
        .collect();
    let mut plain = 0.0;
    let mut scaled = 0.0;
    for (l, c) in losses.into_iter().zip(cu) {
        let l = l?;
        plain += l;
        scaled += c * l;
    }
    let n = data.len() as f64;
    Ok((plain / n, scaled / n))
}

/// Weights `1 / max(min_j f(u, v_j), floor)` from a refinement started at
/// the network prediction.
pub fn refresh_weights(
    net: &LocNet,
    data: &[(Image, Image)],
    t: &Template,
    pcfg: &ParamConfig,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    data.par_iter()
        .map(|(l, r)| {
            let v0 = predict_pair(net, l, r)?;
            let best = sharpen(l, r, t, pcfg, &v0, &cfg.sharpen)?;
            Ok(1.0 / best.loss.total.max(cfg.cu_floor))
        })
        .collect()
}

/// Trains `net` in place on `data` against `t`.
///
/// Outer iteration 0 weights every pair equally; each later outer iteration
/// first refreshes the weights from a sharpening run per pair. Each epoch
/// shuffles the pairs, applies a random translation to every half and takes
/// one Adam step per minibatch with separate rates for the conv stack and
/// the rest of the network. Optimizer state restarts with each outer
/// iteration.
pub fn train_phase(
    net: &mut LocNet,
    data: &[(Image, Image)],
    t: &Template,
    pcfg: &ParamConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let examples: Vec<Example> = data.iter().map(|(l, r)| Example { left: l, right: r }).collect();
    let mut cu = vec![1.0; data.len()];
    let nb = net.backbone_len();
    let n_head = net.params().len() - nb;
    let adam_cfg = cfg.sharpen;
    let mut report = TrainReport::default();
    let (l0, s0) = mean_losses(net, &examples, t, pcfg, &cu)?;
    report.curve.push(EpochRecord {
        outer: 0,
        epoch: 0,
        mean_loss: l0,
        mean_scaled_loss: s0,
    });
    let mut order: Vec<usize> = (0..data.len()).collect();
    'outer: for outer in 0..cfg.outer_iterations {
        if outer > 0 {
            cu = refresh_weights(net, data, t, pcfg, cfg)?;
        }
        let mut adam_backbone = Adam::new(nb, adam_cfg.beta1, adam_cfg.beta2, adam_cfg.eps);
        let mut adam_head = Adam::new(n_head, adam_cfg.beta1, adam_cfg.beta2, adam_cfg.eps);
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let shifted: Vec<(Image, Image)> = order
                .iter()
                .map(|&i| {
                    let (l, r) = &data[i];
                    Ok((augment(l, &mut rng, cfg.augment_shift)?, augment(r, &mut rng, cfg.augment_shift)?))
                })
                .collect::<Result<_>>()?;
            for (chunk_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let start = chunk_idx * cfg.batch_size;
                let batch: Vec<(&Image, &Image, f64)> = chunk
                    .iter()
                    .enumerate()
                    .map(|(k, &i)| (&shifted[start + k].0, &shifted[start + k].1, cu[i]))
                    .collect();
                let (loss, grad) = minibatch_grad(net, &batch, t, pcfg)?;
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    report.aborted = Some(format!("non-finite loss in outer {outer}, epoch {epoch}"));
                    break 'outer;
                }
                let before = net.params().to_vec();
                let params = net.params_mut();
                adam_backbone.step(&mut params[..nb], &grad[..nb], cfg.lr_backbone);
                adam_head.step(&mut params[nb..], &grad[nb..], cfg.lr_head);
                if params.iter().any(|p| !p.is_finite()) {
                    params.copy_from_slice(&before);
                    report.aborted = Some(format!("non-finite weights in outer {outer}, epoch {epoch}"));
                    break 'outer;
                }
            }
            let (l, s) = mean_losses(net, &examples, t, pcfg, &cu)?;
            log::info!("outer {outer} epoch {epoch}: mean loss {l:.5}, scaled {s:.5}");
            report.curve.push(EpochRecord {
                outer,
                epoch,
                mean_loss: l,
                mean_scaled_loss: s,
            });
        }
    }
    report.cu = cu;
    Ok(report)
}
