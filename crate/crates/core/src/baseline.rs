//! Sliding-window NCC template matching over a small scale pyramid.
//!
//! The correlation numerator is computed with a 2-D FFT and the window
//! means and energies with summed-area tables, following Lewis' fast
//! normalized cross-correlation. Candidate placements are rescored with the
//! same matching loss as the continuous methods.

use std::time::Instant;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::detection::{Detection, DetectionStats, Method};
use crate::error::{Error, Result};
use crate::image::{resize, Image};
use crate::loss::{breakdown_from_sides, side_loss, MatchingLoss, Template, VARIANCE_EPS};
use crate::param::{ParamConfig, PoseParams};

/// Summed-area tables of `x` and `x²` with a zero first row and column.
struct Integral {
    width: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Integral {
    fn new(values: &[f64], h: usize, w: usize) -> Self {
        let stride = w + 1;
        let mut sum = vec![0.0; (h + 1) * stride];
        let mut sq = vec![0.0; (h + 1) * stride];
        for r in 0..h {
            let mut row_s = 0.0;
            let mut row_q = 0.0;
            for c in 0..w {
                let v = values[r * w + c];
                row_s += v;
                row_q += v * v;
                sum[(r + 1) * stride + c + 1] = sum[r * stride + c + 1] + row_s;
                sq[(r + 1) * stride + c + 1] = sq[r * stride + c + 1] + row_q;
            }
        }
        Integral {
            width: stride,
            sum,
            sq,
        }
    }

    fn rect(table: &[f64], stride: usize, r: usize, c: usize, h: usize, w: usize) -> f64 {
        table[(r + h) * stride + c + w] - table[r * stride + c + w] - table[(r + h) * stride + c]
            + table[r * stride + c]
    }

    fn window(&self, r: usize, c: usize, h: usize, w: usize) -> (f64, f64) {
        (
            Self::rect(&self.sum, self.width, r, c, h, w),
            Self::rect(&self.sq, self.width, r, c, h, w),
        )
    }
}

fn check_sizes(img: &Image, tmpl: &Image) -> Result<()> {
    if tmpl.height() > img.height() || tmpl.width() > img.width() {
        return Err(Error::TemplateTooLarge {
            template_h: tmpl.height(),
            template_w: tmpl.width(),
            image_h: img.height(),
            image_w: img.width(),
        });
    }
    Ok(())
}

/// Mean-removed template values and their norm.
fn centered_template(tmpl: &Image) -> (Vec<f64>, f64) {
    let vals = tmpl.to_f64();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let centered: Vec<f64> = vals.iter().map(|v| v - mean).collect();
    let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    (centered, norm)
}

/// Image values shifted by their global mean, which keeps the running sums
/// well conditioned.
fn shifted_image(img: &Image) -> Vec<f64> {
    let vals = img.to_f64();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.into_iter().map(|v| v - mean).collect()
}

fn fft_2d(data: &mut [Complex<f64>], h: usize, w: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = data[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            data[r * w + c] = col[r];
        }
    }
}

/// Cross-correlation `Σ img[r+i, c+j]·k[i, j]` at every valid placement.
fn correlate_fft(img: &[f64], h: usize, w: usize, kernel: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    let mut planner = FftPlanner::new();
    let mut a: Vec<Complex<f64>> = img.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut b = vec![Complex::new(0.0, 0.0); h * w];
    for i in 0..kh {
        for j in 0..kw {
            b[i * w + j] = Complex::new(kernel[i * kw + j], 0.0);
        }
    }
    fft_2d(&mut a, h, w, &mut planner, false);
    fft_2d(&mut b, h, w, &mut planner, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y.conj();
    }
    fft_2d(&mut a, h, w, &mut planner, true);
    let scale = 1.0 / (h * w) as f64;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            out.push(a[r * w + c].re * scale);
        }
    }
    out
}

/// Threshold below which a window's centered energy counts as constant.
fn energy_floor(n: usize, values: &[f64]) -> f64 {
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    VARIANCE_EPS.max(1e-11 * n as f64 * peak * peak)
}

/// Normalized cross-correlation of `tmpl` at every top-left placement inside
/// `img`, in `[-1, 1]`; windows with (near) zero variance score 0.
pub fn sliding_ncc(img: &Image, tmpl: &Image) -> Result<Image> {
    check_sizes(img, tmpl)?;
    let (h, w) = img.shape();
    let (th, tw) = tmpl.shape();
    let (oh, ow) = (h - th + 1, w - tw + 1);
    let (t, t_norm) = centered_template(tmpl);
    if t_norm * t_norm < VARIANCE_EPS {
        return Ok(Image::zeros(oh, ow));
    }
    let x = shifted_image(img);
    let numer = correlate_fft(&x, h, w, &t, th, tw);
    let integral = Integral::new(&x, h, w);
    let n = th * tw;
    let floor = energy_floor(n, &x);
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let (s, q) = integral.window(r, c, th, tw);
            let energy = q - s * s / n as f64;
            let v = if energy <= floor {
                0.0
            } else {
                (numer[r * ow + c] / (energy.sqrt() * t_norm)).clamp(-1.0, 1.0)
            };
            out.push(v as f32);
        }
    }
    Image::new(oh, ow, out)
}

/// Direct double-loop NCC; the reference for [`sliding_ncc`].
pub fn sliding_ncc_direct(img: &Image, tmpl: &Image) -> Result<Image> {
    check_sizes(img, tmpl)?;
    let (h, w) = img.shape();
    let (th, tw) = tmpl.shape();
    let (oh, ow) = (h - th + 1, w - tw + 1);
    let (t, t_norm) = centered_template(tmpl);
    let x = shifted_image(img);
    let n = (th * tw) as f64;
    let floor = energy_floor(th * tw, &x);
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let mut mean = 0.0;
            for i in 0..th {
                for j in 0..tw {
                    mean += x[(r + i) * w + c + j];
                }
            }
            mean /= n;
            let mut dot = 0.0;
            let mut sq = 0.0;
            for i in 0..th {
                for j in 0..tw {
                    let d = x[(r + i) * w + c + j] - mean;
                    dot += d * t[i * tw + j];
                    sq += d * d;
                }
            }
            let v = if sq <= floor || t_norm * t_norm < VARIANCE_EPS {
                0.0
            } else {
                (dot / (sq.sqrt() * t_norm)).clamp(-1.0, 1.0)
            };
            out.push(v as f32);
        }
    }
    Image::new(oh, ow, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Template width over resized image width, one entry per pyramid level.
    pub ratios: Vec<f64>,
    /// Placements per level and side rescored with the matching loss.
    pub candidates_per_scale: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            ratios: vec![0.20, 0.27, 0.34, 0.41, 0.48],
            candidates_per_scale: 3,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty()
            || self.candidates_per_scale == 0
            || self.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0))
        {
            return Err(Error::InvalidConfig(format!("baseline {self:?}")));
        }
        Ok(())
    }
}

/// Resized half dimensions for one pyramid level, so the template covers
/// its own pixel count at unit sampling.
pub fn level_shape(ratio: f64, template_h: usize, template_w: usize, f: f64) -> (usize, usize) {
    let w = ((template_w - 1) as f64 / ratio).round() as usize + 1;
    let h = ((template_h - 1) as f64 * f / ratio).round() as usize + 1;
    (h, w)
}

/// Pose of the template frame placed with its top-left pixel at `(row, col)`
/// of a `level_h x level_w` image.
pub fn placement_pose(
    row: usize,
    col: usize,
    level_h: usize,
    level_w: usize,
    template_h: usize,
    template_w: usize,
) -> PoseParams {
    let cx = col as f64 + 0.5 * (template_w - 1) as f64;
    let cy = row as f64 + 0.5 * (template_h - 1) as f64;
    let scale = (template_w - 1) as f64 / (level_w - 1) as f64;
    PoseParams::new(
        scale,
        2.0 * cx / (level_w - 1) as f64 - 1.0,
        2.0 * cy / (level_h - 1) as f64 - 1.0,
        0.0,
    )
}

/// Top `k` placements by `|ncc|`, suppressing neighbours within `radius`
/// pixels of an already chosen one. Ties go to the earlier row-major index.
pub fn top_candidates(map: &Image, k: usize, radius: usize) -> Vec<(usize, usize, f32)> {
    let mut order: Vec<usize> = (0..map.data().len()).collect();
    let data = map.data();
    order.sort_by(|&a, &b| data[b].abs().total_cmp(&data[a].abs()).then(a.cmp(&b)));
    let w = map.width();
    let mut chosen: Vec<(usize, usize, f32)> = Vec::with_capacity(k);
    for idx in order {
        if chosen.len() == k {
            break;
        }
        let (r, c) = (idx / w, idx % w);
        let close = chosen
            .iter()
            .any(|&(cr, cc, _)| cr.abs_diff(r) <= radius && cc.abs_diff(c) <= radius);
        if !close {
            chosen.push((r, c, data[idx]));
        }
    }
    chosen
}

struct Scored {
    pose: PoseParams,
    loss: MatchingLoss,
}

fn best_on_level(half: &Image, t: &Template, ratio: f64, cfg: &BaselineConfig) -> Result<(Scored, usize)> {
    let (th, tw) = (t.height(), t.width());
    let (lh, lw) = level_shape(ratio, th, tw, t.f());
    let level = resize(half, lh, lw)?;
    let map = sliding_ncc(&level, t.patch())?;
    let radius = (th.min(tw) / 4).max(1);
    let pcfg = t.param_config(&ParamConfig::default());
    let mut best: Option<Scored> = None;
    let cands = top_candidates(&map, cfg.candidates_per_scale, radius);
    for &(r, c, _) in &cands {
        let pose = placement_pose(r, c, lh, lw, th, tw).clamped(&pcfg);
        let loss = side_loss(half, &pose, t, t.f());
        if best.as_ref().is_none_or(|b| loss.value < b.loss.value) {
            best = Some(Scored { pose, loss });
        }
    }
    let best = best.ok_or_else(|| Error::InvalidImage("empty correlation map".into()))?;
    Ok((best, cands.len()))
}

/// Multi-scale sliding NCC on both halves; the level with the smallest
/// `l_left + l_right` wins.
///
/// Both halves are matched on the same pyramid level. Levels where the
/// template does not fit are skipped.
pub fn multiscale_match(u_left: &Image, u_right: &Image, t: &Template, cfg: &BaselineConfig) -> Result<Detection> {
    cfg.validate()?;
    let started = Instant::now();
    let mut best: Option<(f64, Scored, Scored)> = None;
    let mut evaluated = 0;
    let mut last_err = None;
    for &ratio in &cfg.ratios {
        let level = best_on_level(u_left, t, ratio, cfg).and_then(|l| Ok((l, best_on_level(u_right, t, ratio, cfg)?)));
        let ((left, nl), (right, nr)) = match level {
            Ok(x) => x,
            Err(e @ Error::TemplateTooLarge { .. }) => {
                log::warn!("skipping pyramid level {ratio}: {e}");
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        evaluated += nl + nr;
        let sum = left.loss.value + right.loss.value;
        if best.as_ref().is_none_or(|b| sum < b.0) {
            best = Some((sum, left, right));
        }
    }
    let (_, left, right) = match best {
        Some(b) => b,
        None => return Err(last_err.unwrap_or_else(|| Error::InvalidConfig("no pyramid levels".into()))),
    };
    let breakdown = breakdown_from_sides(&left.loss, &right.loss, &left.pose, &right.pose);
    Ok(Detection::new(
        Method::Baseline,
        left.pose,
        right.pose,
        &breakdown,
        DetectionStats {
            inits: evaluated,
            evals: evaluated,
            wall_ms: started.elapsed().as_millis() as u64,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |_, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn fast_map_matches_direct_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let h = rng.random_range(8..=64);
            let w = rng.random_range(8..=64);
            let th = rng.random_range(2..=h.min(16));
            let tw = rng.random_range(2..=w.min(16));
            let img = random_image(&mut rng, h, w);
            let tmpl = random_image(&mut rng, th, tw);
            let fast = sliding_ncc(&img, &tmpl).unwrap();
            let slow = sliding_ncc_direct(&img, &tmpl).unwrap();
            let err = fast
                .data()
                .iter()
                .zip(slow.data())
                .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-4, "{h}x{w} / {th}x{tw}: {err}");
        }
    }

    #[test]
    fn exact_copy_peaks_at_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 40, 50);
        let tmpl = img.crop(11, 23, 9, 7);
        let map = sliding_ncc(&img, &tmpl).unwrap();
        assert!((map.get(11, 23) - 1.0).abs() < 1e-4);
        let top = top_candidates(&map, 1, 1);
        assert_eq!((top[0].0, top[0].1), (11, 23));
    }

    #[test]
    fn constant_region_scores_zero() {
        let mut img = Image::constant(20, 20, 0.5);
        img.set(0, 0, 1.0);
        let tmpl = Image::from_fn(5, 5, |r, c| (r * 5 + c) as f32);
        let map = sliding_ncc(&img, &tmpl).unwrap();
        assert_eq!(map.get(10, 10), 0.0);
    }

    #[test]
    fn oversized_template_is_rejected() {
        let img = Image::zeros(10, 10);
        let tmpl = Image::zeros(11, 4);
        assert!(matches!(sliding_ncc(&img, &tmpl), Err(Error::TemplateTooLarge { .. })));
    }

    #[test]
    fn translation_moves_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 48, 48);
        let tmpl = img.crop(20, 18, 8, 8);
        let shifted = img.translate(3, -2);
        let a = top_candidates(&sliding_ncc(&img, &tmpl).unwrap(), 1, 1)[0];
        let b = top_candidates(&sliding_ncc(&shifted, &tmpl).unwrap(), 1, 1)[0];
        assert_eq!((b.0 as isize - a.0 as isize, b.1 as isize - a.1 as isize), (3, -2));
    }

    #[test]
    fn suppression_keeps_distinct_candidates() {
        let map = Image::from_fn(10, 10, |r, c| if (r, c) == (2, 2) { 0.9 } else if (r, c) == (2, 3) { 0.8 } else if (r, c) == (7, 7) { -0.85 } else { 0.0 });
        let top = top_candidates(&map, 2, 2);
        assert_eq!((top[0].0, top[0].1), (2, 2));
        assert_eq!((top[1].0, top[1].1), (7, 7));
    }

    #[test]
    fn placement_pose_spans_frame() {
        let p = placement_pose(0, 0, 30, 40, 10, 8);
        assert!((p.tx - (p.scale - 1.0)).abs() < 1e-12);
        let q = placement_pose(20, 32, 30, 40, 10, 8);
        assert!((q.tx - (1.0 - q.scale)).abs() < 1e-12);
        assert_eq!(q.rot, 0.0);
    }
}
