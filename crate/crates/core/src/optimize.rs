//! Adam descent with trace-minimum selection, the sharpening step, and the
//! grid-initialized multi-start search.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{Detection, DetectionStats, Method};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{pair_loss_grad, split_v, LossBreakdown, Template};
use crate::param::{constrain, unconstrain, ParamConfig, PoseParams};

/// Scale and translation endpoints are moved inward by this much before
/// inversion so they stay invertible.
pub const ENDPOINT_NUDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            step_size: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations: 300,
        }
    }
}

impl AdamConfig {
    pub fn with_iterations(iterations: usize) -> Self {
        AdamConfig {
            iterations,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.step_size > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.iterations >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("adam {self:?}")))
        }
    }
}

/// First and second moment state of Adam over a flat parameter vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(dim: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn from_config(dim: usize, cfg: &AdamConfig) -> Self {
        Adam::new(dim, cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update `x ← x - lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// One objective evaluation: value, gradient and a method-specific record.
pub struct Evaluation<R> {
    pub value: f64,
    pub grad: Vec<f64>,
    pub record: R,
}

#[derive(Clone, Debug)]
pub struct TracePoint<R> {
    pub v: Vec<f64>,
    pub value: f64,
    pub record: R,
}

/// Every iterate of a descent, including the starting point.
#[derive(Clone, Debug)]
pub struct OptTrace<R> {
    pub points: Vec<TracePoint<R>>,
    pub best: usize,
    /// Set when a non-finite value stopped the descent early.
    pub truncated_at: Option<usize>,
}

impl<R> OptTrace<R> {
    pub fn best_point(&self) -> &TracePoint<R> {
        &self.points[self.best]
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }
}

/// Best iterate found by [`adam_descend`].
#[derive(Clone, Debug)]
pub struct DescentBest<R> {
    pub v: Vec<f64>,
    pub value: f64,
    pub record: R,
    pub evals: usize,
    pub truncated_at: Option<usize>,
}

fn finite_eval<R>(e: &Evaluation<R>) -> bool {
    e.value.is_finite() && e.grad.iter().all(|g| g.is_finite())
}

/// Runs Adam and reports every iterate to `visit`; returns the trace minimum.
///
/// Ties keep the earliest iterate.
pub fn adam_descend<R: Clone>(
    mut objective: impl FnMut(&[f64]) -> Evaluation<R>,
    v0: &[f64],
    cfg: &AdamConfig,
    mut visit: impl FnMut(&[f64], &Evaluation<R>),
) -> Result<DescentBest<R>> {
    let mut v = v0.to_vec();
    let first = objective(&v);
    if !finite_eval(&first) || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    visit(&v, &first);
    let mut best = DescentBest {
        v: v.clone(),
        value: first.value,
        record: first.record.clone(),
        evals: 1,
        truncated_at: None,
    };
    let mut adam = Adam::from_config(v.len(), cfg);
    let mut grad = first.grad;
    for it in 1..=cfg.iterations {
        adam.step(&mut v, &grad, cfg.step_size);
        let e = objective(&v);
        best.evals += 1;
        if !finite_eval(&e) {
            best.truncated_at = Some(it);
            break;
        }
        visit(&v, &e);
        if e.value < best.value {
            best.value = e.value;
            best.v.copy_from_slice(&v);
            best.record = e.record.clone();
        }
        grad = e.grad;
    }
    Ok(best)
}

/// Adam from `v0` recording the whole trace; the reported optimum is the
/// trace minimum, not the last iterate.
pub fn adam_minimize<R: Clone>(
    objective: impl FnMut(&[f64]) -> Evaluation<R>,
    v0: &[f64],
    cfg: &AdamConfig,
) -> Result<OptTrace<R>> {
    let mut points = Vec::with_capacity(cfg.iterations + 1);
    let best = adam_descend(objective, v0, cfg, |v, e| {
        points.push(TracePoint {
            v: v.to_vec(),
            value: e.value,
            record: e.record.clone(),
        })
    })?;
    let best_idx = points
        .iter()
        .position(|p| p.value == best.value && p.v == best.v)
        .expect("best iterate is in the trace");
    Ok(OptTrace {
        points,
        best: best_idx,
        truncated_at: best.truncated_at,
    })
}

/// The bilateral objective as an Adam evaluation.
pub fn pair_objective<'a>(
    u_left: &'a Image,
    u_right: &'a Image,
    t: &'a Template,
    cfg: &'a ParamConfig,
) -> impl FnMut(&[f64]) -> Evaluation<LossBreakdown> + 'a {
    move |v: &[f64]| {
        let v: &[f64; 8] = v.try_into().expect("bilateral parameter vector has 8 entries");
        let (loss, grad) = pair_loss_grad(u_left, u_right, v, t, cfg);
        Evaluation {
            value: loss.total,
            grad: grad.to_vec(),
            record: loss,
        }
    }
}

/// Result of a refinement run.
#[derive(Clone, Debug)]
pub struct Refined {
    pub v: [f64; 8],
    pub loss: LossBreakdown,
    pub evals: usize,
}

impl Refined {
    pub fn poses(&self, cfg: &ParamConfig) -> (PoseParams, PoseParams) {
        let (l, r) = split_v(&self.v);
        (constrain(&l, cfg), constrain(&r, cfg))
    }
}

/// Adam refinement of the bilateral objective from `v0`, returning the
/// smallest recorded cost.
pub fn sharpen(
    u_left: &Image,
    u_right: &Image,
    t: &Template,
    cfg: &ParamConfig,
    v0: &[f64; 8],
    acfg: &AdamConfig,
) -> Result<Refined> {
    let best = adam_descend(pair_objective(u_left, u_right, t, cfg), v0, acfg, |_, _| {})?;
    Ok(Refined {
        v: best.v.try_into().expect("8 entries"),
        loss: best.record,
        evals: best.evals,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Number of equispaced scales over the full scale range.
    pub scales: usize,
    /// Fraction of the patch width between adjacent horizontal starts.
    pub overlap_ratio: f64,
    /// Right-side horizontal starts lie within this distance of the left one.
    pub pair_halfwidth: f64,
    pub include_rotation_inits: bool,
    pub iters_per_init: usize,
    pub polish_iters: usize,
    /// Worker threads for the sweep; 0 uses the global pool.
    pub threads: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            scales: 6,
            overlap_ratio: 0.25,
            pair_halfwidth: 1.0 / 3.0,
            include_rotation_inits: false,
            iters_per_init: 60,
            polish_iters: 300,
            threads: 0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.scales >= 2
            && self.overlap_ratio > 0.0
            && self.overlap_ratio < 1.0
            && self.pair_halfwidth >= 0.0
            && self.iters_per_init >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("grid {self:?}")))
        }
    }
}

/// Nominal spacing `r · 2s` between translation starts at scale `s`.
pub fn grid_spacing(scale: f64, overlap_ratio: f64) -> f64 {
    overlap_ratio * 2.0 * scale
}

/// Number of translation starts `1 + ceil((2 - 2s) / (r · 2s))`.
pub fn translation_count(scale: f64, overlap_ratio: f64) -> usize {
    1 + ((2.0 - 2.0 * scale) / grid_spacing(scale, overlap_ratio)).ceil() as usize
}

/// Equispaced centers covering `[s - 1, 1 - s]`, endpoints included.
pub fn translation_centers(scale: f64, overlap_ratio: f64) -> Vec<f64> {
    let n = translation_count(scale, overlap_ratio);
    let lo = scale - 1.0;
    if n == 1 {
        return vec![0.0];
    }
    let step = (2.0 - 2.0 * scale) / (n - 1) as f64;
    (0..n).map(|j| lo + j as f64 * step).collect()
}

/// Equispaced scales over `[α₀, α₀ + β₀]`, endpoints nudged inward.
pub fn grid_scales(n: usize, pcfg: &ParamConfig) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let s = pcfg.alpha0 + pcfg.beta0 * i as f64 / (n - 1) as f64;
            s.clamp(pcfg.alpha0 + ENDPOINT_NUDGE, pcfg.max_scale() - ENDPOINT_NUDGE)
        })
        .collect()
}

/// Start poses `(left, right)` before inversion, in sweep order.
pub fn grid_init_poses(gcfg: &GridConfig, pcfg: &ParamConfig) -> Vec<(PoseParams, PoseParams)> {
    let nudge = 1.0 - ENDPOINT_NUDGE;
    let rotations: Vec<f64> = if gcfg.include_rotation_inits && pcfg.rot_bound > 0.0 {
        vec![0.0, -0.5 * pcfg.rot_bound, 0.5 * pcfg.rot_bound]
    } else {
        vec![0.0]
    };
    let mut out = Vec::new();
    for s in grid_scales(gcfg.scales, pcfg) {
        let horizontal = translation_centers(s, gcfg.overlap_ratio);
        let vertical = translation_centers(s / pcfg.f, gcfg.overlap_ratio);
        for &hl in &horizontal {
            for &vy in &vertical {
                for &hr in &horizontal {
                    if (hr - hl).abs() > gcfg.pair_halfwidth + 1e-12 {
                        continue;
                    }
                    for &rot in &rotations {
                        out.push((
                            PoseParams::new(s, hl * nudge, vy * nudge, rot),
                            PoseParams::new(s, hr * nudge, vy * nudge, rot),
                        ));
                    }
                }
            }
        }
    }
    out
}

/// Unconstrained 8-vector starts of the grid search.
pub fn grid_init_points(gcfg: &GridConfig, pcfg: &ParamConfig) -> Vec<[f64; 8]> {
    grid_init_poses(gcfg, pcfg)
        .into_iter()
        .map(|(l, r)| {
            let vl = unconstrain(&l, pcfg).expect("nudged grid poses are interior");
            let vr = unconstrain(&r, pcfg).expect("nudged grid poses are interior");
            let mut v = [0.0; 8];
            v[..4].copy_from_slice(&vl.0);
            v[4..].copy_from_slice(&vr.0);
            v
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub inits: usize,
    pub failed_inits: usize,
    pub evals: usize,
    pub wall_ms: u64,
    /// Index of the start whose descent won before polishing.
    pub best_init: usize,
}

fn run_in_pool<T: Send>(threads: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(job());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

/// Multi-start Adam from every grid start, then a polish run from the best.
///
/// Starts run independently (in parallel when `threads != 1`) and are
/// reduced by `(loss, start index)`, so the result does not depend on the
/// thread count.
pub fn grid_search(
    u_left: &Image,
    u_right: &Image,
    t: &Template,
    pcfg: &ParamConfig,
    gcfg: &GridConfig,
    acfg: &AdamConfig,
) -> Result<(Detection, SearchStats)> {
    gcfg.validate()?;
    acfg.validate()?;
    let started = Instant::now();
    let inits = grid_init_points(gcfg, pcfg);
    let per_init = AdamConfig {
        iterations: gcfg.iters_per_init,
        ..*acfg
    };
    let run = |v0: &[f64; 8]| sharpen(u_left, u_right, t, pcfg, v0, &per_init);
    let results: Vec<Result<Refined>> = if gcfg.threads == 1 {
        inits.iter().map(run).collect()
    } else {
        run_in_pool(gcfg.threads, || inits.par_iter().map(run).collect())?
    };

    let mut stats = SearchStats {
        inits: inits.len(),
        ..SearchStats::default()
    };
    let mut best: Option<(usize, Refined)> = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(r) => {
                stats.evals += r.evals;
                let better = match &best {
                    None => true,
                    Some((_, b)) => r.loss.total < b.loss.total,
                };
                if better {
                    best = Some((i, r));
                }
            }
            Err(e) => {
                log::warn!("grid start {i} failed: {e}");
                stats.failed_inits += 1;
            }
        }
    }
    let (best_init, mut best) = best.ok_or(Error::AllStartsFailed(inits.len()))?;
    stats.best_init = best_init;
    if gcfg.polish_iters > 0 {
        let polish = AdamConfig {
            iterations: gcfg.polish_iters,
            ..*acfg
        };
        let refined = sharpen(u_left, u_right, t, pcfg, &best.v, &polish)?;
        stats.evals += refined.evals;
        if refined.loss.total < best.loss.total {
            best = refined;
        }
    }
    stats.wall_ms = started.elapsed().as_millis() as u64;
    let (pl, pr) = best.poses(pcfg);
    let det = Detection::new(
        Method::GridSearch,
        pl,
        pr,
        &best.loss,
        DetectionStats {
            inits: stats.inits,
            evals: stats.evals,
            wall_ms: stats.wall_ms,
        },
    );
    Ok((det, stats))
}
