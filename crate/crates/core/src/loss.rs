//! Matching energy: negative normalized cross-correlation over the full
//! template frame and two sub-windows, negative-image handling, and the
//! regularized bilateral cost with its analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{warp_pose_with_grad_into, warp_values, Image};
use crate::param::{affine_matrix, constrain, pullback, ParamConfig, PoseParams, UnconstrainedParams};

/// Squared-norm floor below which a window counts as constant.
pub const VARIANCE_EPS: f64 = 1e-12;

/// Fractional rectangle of the template frame, `(left, top, right, bottom)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubWindow {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

/// Pixel rectangle `[row0, row1) x [col0, col1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl PixelRect {
    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }
}

impl SubWindow {
    pub const fn new(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        SubWindow {
            left,
            top,
            right,
            bottom,
        }
    }

    pub const fn full() -> Self {
        SubWindow::new(0.0, 0.0, 1.0, 1.0)
    }

    pub const fn default_red() -> Self {
        SubWindow::new(0.02, 0.30, 0.25, 0.70)
    }

    pub const fn default_green() -> Self {
        SubWindow::new(0.75, 0.30, 0.98, 0.70)
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        SubWindow::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.left, self.top, self.right, self.bottom]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.left
            && self.left < self.right
            && self.right <= 1.0
            && 0.0 <= self.top
            && self.top < self.bottom
            && self.bottom <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("sub-window {:?}", self.to_array())))
        }
    }

    /// Covering pixel rectangle at `h x w` resolution (floor/ceil bounds).
    pub fn pixel_rect(&self, h: usize, w: usize) -> PixelRect {
        let lo = |f: f64, n: usize| ((f * n as f64).floor().max(0.0) as usize).min(n - 1);
        let hi = |f: f64, n: usize, start: usize| {
            ((f * n as f64).ceil() as usize).clamp(start + 1, n)
        };
        let row0 = lo(self.top, h);
        let col0 = lo(self.left, w);
        PixelRect {
            row0,
            row1: hi(self.bottom, h, row0),
            col0,
            col1: hi(self.right, w, col0),
        }
    }
}

/// Centered template values over one window.
#[derive(Clone, Debug)]
struct WindowRef {
    rect: PixelRect,
    centered: Vec<f64>,
    norm: f64,
}

impl WindowRef {
    fn new(patch: &[f64], width: usize, rect: PixelRect) -> Self {
        let vals: Vec<f64> = rect_iter(rect, width).map(|i| patch[i]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let centered: Vec<f64> = vals.iter().map(|v| v - mean).collect();
        let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
        WindowRef {
            rect,
            centered,
            norm,
        }
    }

    fn degenerate(&self) -> bool {
        self.norm * self.norm < VARIANCE_EPS
    }
}

fn rect_iter(rect: PixelRect, width: usize) -> impl Iterator<Item = usize> {
    (rect.row0..rect.row1).flat_map(move |r| (rect.col0..rect.col1).map(move |c| r * width + c))
}

/// Row slices of `u` covered by `rect`.
fn rect_rows(u: &[f64], width: usize, rect: PixelRect) -> impl Iterator<Item = &[f64]> {
    (rect.row0..rect.row1).map(move |r| &u[r * width + rect.col0..r * width + rect.col1])
}

/// Reference patch with its two sub-windows.
#[derive(Clone, Debug)]
pub struct Template {
    patch: Image,
    red: SubWindow,
    green: SubWindow,
    f: f64,
    // Global, red, green.
    windows: [WindowRef; 3],
}

/// Window correlation and its pieces needed for the gradient.
#[derive(Clone, Copy, Debug)]
struct Corr {
    rho: f64,
    mean: f64,
    norm: f64,
    degenerate: bool,
}

fn correlate(u: &[f64], width: usize, win: &WindowRef) -> Corr {
    let n = win.centered.len() as f64;
    let cols = win.rect.col1 - win.rect.col0;
    let mean = rect_rows(u, width, win.rect).map(|row| row.iter().sum::<f64>()).sum::<f64>() / n;
    let mut dot = 0.0;
    let mut sq = 0.0;
    for (row, trow) in rect_rows(u, width, win.rect).zip(win.centered.chunks_exact(cols)) {
        for (x, t) in row.iter().zip(trow) {
            let d = x - mean;
            dot += d * t;
            sq += d * d;
        }
    }
    if sq < VARIANCE_EPS || win.degenerate() {
        return Corr {
            rho: 0.0,
            mean,
            norm: sq.sqrt(),
            degenerate: true,
        };
    }
    let norm = sq.sqrt();
    Corr {
        rho: (dot / (norm * win.norm)).clamp(-1.0, 1.0),
        mean,
        norm,
        degenerate: false,
    }
}

/// Adds `scale · dρ/du` of one window into `grad`.
fn accumulate_corr_grad(
    u: &[f64],
    width: usize,
    win: &WindowRef,
    corr: &Corr,
    scale: f64,
    grad: &mut [f64],
) {
    if corr.degenerate {
        return;
    }
    let a = scale / (corr.norm * win.norm);
    let b = scale * corr.rho / (corr.norm * corr.norm);
    let cols = win.rect.col1 - win.rect.col0;
    for (r, trow) in (win.rect.row0..win.rect.row1).zip(win.centered.chunks_exact(cols)) {
        let span = r * width + win.rect.col0..r * width + win.rect.col1;
        for ((g, x), t) in grad[span.clone()].iter_mut().zip(&u[span]).zip(trow) {
            *g += a * t - b * (x - corr.mean);
        }
    }
}

/// A cost value in `[0, 2]` and whether an ε-guard fired.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NccCost {
    pub value: f64,
    pub degenerate: bool,
}

/// Result of [`matching_loss`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingLoss {
    pub value: f64,
    /// The negated image gave the smaller cost.
    pub negated: bool,
    pub degenerate: bool,
}

impl Template {
    pub fn new(patch: Image, red: SubWindow, green: SubWindow) -> Result<Self> {
        red.validate()?;
        green.validate()?;
        let (h, w) = patch.shape();
        let f = h as f64 / w as f64;
        if f < 1.0 {
            return Err(Error::InvalidConfig(format!(
                "template aspect height/width must be >= 1, got {h}x{w}"
            )));
        }
        let values = patch.to_f64();
        let make = |win: &SubWindow| WindowRef::new(&values, w, win.pixel_rect(h, w));
        let windows = [make(&SubWindow::full()), make(&red), make(&green)];
        for (name, win) in ["global", "red", "green"].iter().zip(&windows) {
            if win.rect.area() < 4 {
                return Err(Error::InvalidConfig(format!(
                    "{name} window covers fewer than 4 pixels"
                )));
            }
            if win.degenerate() {
                return Err(Error::InvalidConfig(format!(
                    "template is constant over the {name} window"
                )));
            }
        }
        Ok(Template {
            patch,
            red,
            green,
            f,
            windows,
        })
    }

    pub fn with_default_windows(patch: Image) -> Result<Self> {
        Template::new(patch, SubWindow::default_red(), SubWindow::default_green())
    }

    pub fn patch(&self) -> &Image {
        &self.patch
    }

    pub fn red(&self) -> SubWindow {
        self.red
    }

    pub fn green(&self) -> SubWindow {
        self.green
    }

    /// Aspect ratio height / width.
    pub fn f(&self) -> f64 {
        self.f
    }

    pub fn height(&self) -> usize {
        self.patch.height()
    }

    pub fn width(&self) -> usize {
        self.patch.width()
    }

    /// Parametrization bounds matching this template's aspect.
    pub fn param_config(&self, base: &ParamConfig) -> ParamConfig {
        ParamConfig { f: self.f, ..*base }
    }

    /// Matching loss of candidate samples laid out on the template grid;
    /// when `grad` is given, writes `dL/du` of the active branch into it.
    pub fn evaluate(&self, u: &[f64], grad: Option<&mut [f64]>) -> MatchingLoss {
        assert_eq!(u.len(), self.patch.data().len(), "candidate/template size mismatch");
        let w = self.patch.width();
        let c = self.windows.each_ref().map(|win| correlate(u, w, win));
        // Costs of the image and of its negative: 1 - ρ and 1 + ρ.
        let pos_sub = if 1.0 - c[1].rho >= 1.0 - c[2].rho { 1 } else { 2 };
        let neg_sub = if 1.0 + c[1].rho >= 1.0 + c[2].rho { 1 } else { 2 };
        let pos = 0.5 * ((1.0 - c[0].rho) + (1.0 - c[pos_sub].rho));
        let neg = 0.5 * ((1.0 + c[0].rho) + (1.0 + c[neg_sub].rho));
        let negated = neg < pos;
        let (value, sub, sign) = if negated {
            (neg, neg_sub, -1.0)
        } else {
            (pos, pos_sub, 1.0)
        };
        if let Some(grad) = grad {
            grad.fill(0.0);
            accumulate_corr_grad(u, w, &self.windows[0], &c[0], -0.5 * sign, grad);
            accumulate_corr_grad(u, w, &self.windows[sub], &c[sub], -0.5 * sign, grad);
        }
        MatchingLoss {
            value,
            negated,
            degenerate: c.iter().any(|c| c.degenerate),
        }
    }

    fn window_ref(&self, k: usize) -> &WindowRef {
        &self.windows[k]
    }
}

fn assert_same_shape(u: &Image, w: &Image) {
    assert_eq!(u.shape(), w.shape(), "images must have the same shape");
}

/// `1 - NCC(u, w)` over a pixel rectangle.
fn ncc_over(u: &Image, w: &Image, rect: PixelRect) -> NccCost {
    let width = w.width();
    let wref = WindowRef::new(&w.to_f64(), width, rect);
    let corr = correlate(&u.to_f64(), width, &wref);
    NccCost {
        value: 1.0 - corr.rho,
        degenerate: corr.degenerate,
    }
}

/// Negative normalized cross-correlation `1 - ũ·w̃ / (‖ũ‖‖w̃‖)` in `[0, 2]`.
///
/// A window whose squared centered norm is below [`VARIANCE_EPS`] scores
/// 1.0 with `degenerate` set.
pub fn ncc_cost(u: &Image, w: &Image) -> NccCost {
    assert_same_shape(u, w);
    ncc_over(u, w, SubWindow::full().pixel_rect(u.height(), u.width()))
}

/// [`ncc_cost`] restricted to a fractional sub-window.
pub fn windowed_cost(u: &Image, w: &Image, win: &SubWindow) -> NccCost {
    assert_same_shape(u, w);
    ncc_over(u, w, win.pixel_rect(u.height(), u.width()))
}

/// `½(c_global + max(c_red, c_green))` without negative handling.
pub fn combined_cost(u: &Image, t: &Template) -> NccCost {
    assert_same_shape(u, t.patch());
    let vals = u.to_f64();
    let c = [0, 1, 2].map(|k| correlate(&vals, u.width(), t.window_ref(k)));
    NccCost {
        value: 0.5 * ((1.0 - c[0].rho) + (1.0 - c[1].rho).max(1.0 - c[2].rho)),
        degenerate: c.iter().any(|c| c.degenerate),
    }
}

/// Minimum of the combined cost over `u` and `-u`.
pub fn matching_loss(u: &Image, t: &Template) -> MatchingLoss {
    assert_same_shape(u, t.patch());
    t.evaluate(&u.to_f64(), None)
}

/// Decomposed regularized bilateral cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_left: f64,
    pub l_right: f64,
    pub l_reg: f64,
    pub negated_left: bool,
    pub negated_right: bool,
    pub degenerate_left: bool,
    pub degenerate_right: bool,
}

impl LossBreakdown {
    /// `l_left + l_right`, the cross-method comparison value.
    pub fn sides(&self) -> f64 {
        self.l_left + self.l_right
    }
}

/// Scale and vertical-center penalty `(s_l - s_r)² + (ty_l - ty_r)²`.
pub fn regularizer(left: &PoseParams, right: &PoseParams) -> f64 {
    let ds = left.scale - right.scale;
    let dy = left.ty - right.ty;
    ds * ds + dy * dy
}

pub(crate) fn split_v(v: &[f64; 8]) -> (UnconstrainedParams, UnconstrainedParams) {
    (
        UnconstrainedParams([v[0], v[1], v[2], v[3]]),
        UnconstrainedParams([v[4], v[5], v[6], v[7]]),
    )
}

/// Loss of one side at a pose.
pub fn side_loss(half: &Image, pose: &PoseParams, t: &Template, f: f64) -> MatchingLoss {
    let vals = warp_values(half, &affine_matrix(pose, f), t.height(), t.width());
    t.evaluate(&vals, None)
}

/// Assembles a breakdown from per-side losses and poses.
pub fn breakdown_from_sides(
    left: &MatchingLoss,
    right: &MatchingLoss,
    pose_left: &PoseParams,
    pose_right: &PoseParams,
) -> LossBreakdown {
    let l_reg = regularizer(pose_left, pose_right);
    LossBreakdown {
        total: left.value + right.value + l_reg,
        l_left: left.value,
        l_right: right.value,
        l_reg,
        negated_left: left.negated,
        negated_right: right.negated,
        degenerate_left: left.degenerate,
        degenerate_right: right.degenerate,
    }
}

/// Regularized bilateral cost at `v = (v_left, v_right)`.
pub fn pair_loss(
    u_left: &Image,
    u_right: &Image,
    v: &[f64; 8],
    t: &Template,
    cfg: &ParamConfig,
) -> LossBreakdown {
    let (vl, vr) = split_v(v);
    let pl = constrain(&vl, cfg);
    let pr = constrain(&vr, cfg);
    let ll = side_loss(u_left, &pl, t, cfg.f);
    let lr = side_loss(u_right, &pr, t, cfg.f);
    breakdown_from_sides(&ll, &lr, &pl, &pr)
}

/// Matching loss of one side and its gradient with respect to the pose.
pub fn side_loss_pose_grad(
    half: &Image,
    pose: &PoseParams,
    t: &Template,
    f: f64,
) -> (MatchingLoss, [f64; 4]) {
    SCRATCH.with(|cell| {
        let (vals, jac, du) = &mut *cell.borrow_mut();
        warp_pose_with_grad_into(half, pose, f, t.height(), t.width(), vals, jac);
        du.resize(vals.len(), 0.0);
        let loss = t.evaluate(vals, Some(du));
        let mut g = [0.0; 4];
        for (d, row) in du.iter().zip(jac.iter()) {
            for k in 0..4 {
                g[k] += d * row[k];
            }
        }
        (loss, g)
    })
}

type Scratch = (Vec<f64>, Vec<[f64; 4]>, Vec<f64>);

thread_local! {
    static SCRATCH: std::cell::RefCell<Scratch> = const {
        std::cell::RefCell::new((Vec::new(), Vec::new(), Vec::new()))
    };
}

/// [`pair_loss`] and its gradient with respect to `v`.
///
/// The inner `min`/`max` branches contribute the gradient of the active
/// branch.
pub fn pair_loss_grad(
    u_left: &Image,
    u_right: &Image,
    v: &[f64; 8],
    t: &Template,
    cfg: &ParamConfig,
) -> (LossBreakdown, [f64; 8]) {
    let (vl, vr) = split_v(v);
    let pl = constrain(&vl, cfg);
    let pr = constrain(&vr, cfg);
    let (ll, mut gl) = side_loss_pose_grad(u_left, &pl, t, cfg.f);
    let (lr, mut gr) = side_loss_pose_grad(u_right, &pr, t, cfg.f);
    let ds = pl.scale - pr.scale;
    let dy = pl.ty - pr.ty;
    gl[0] += 2.0 * ds;
    gr[0] -= 2.0 * ds;
    gl[2] += 2.0 * dy;
    gr[2] -= 2.0 * dy;
    let vgl = pullback(&vl, cfg, &gl);
    let vgr = pullback(&vr, cfg, &gr);
    let mut grad = [0.0; 8];
    grad[..4].copy_from_slice(&vgl);
    grad[4..].copy_from_slice(&vgr);
    (breakdown_from_sides(&ll, &lr, &pl, &pr), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::unconstrain;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook NCC on plain vectors, independent of the window machinery.
    fn oracle_ncc(u: &[f64], w: &[f64]) -> f64 {
        let n = u.len() as f64;
        let mu = u.iter().sum::<f64>() / n;
        let mw = w.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut du = 0.0;
        let mut dw = 0.0;
        for (a, b) in u.iter().zip(w) {
            num += (a - mu) * (b - mw);
            du += (a - mu).powi(2);
            dw += (b - mw).powi(2);
        }
        1.0 - num / (du.sqrt() * dw.sqrt())
    }

    fn crop_vals(img: &Image, r0: usize, r1: usize, c0: usize, c1: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                out.push(img.get(r, c) as f64);
            }
        }
        out
    }

    fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |_, _| rng.random::<f32>())
    }

    fn smooth_template() -> Template {
        let patch = Image::from_fn(24, 20, |r, c| {
            let x = c as f32 / 19.0 * 2.0 - 1.0;
            let y = r as f32 / 23.0 * 2.0 - 1.0;
            (2.5 * x).sin() * (1.7 * y + 0.3).cos() + 0.3 * x * y
        });
        Template::with_default_windows(patch).unwrap()
    }

    #[test]
    fn ncc_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_image(&mut rng, 10, 12);
        assert!(ncc_cost(&w, &w).value.abs() < 1e-12);
        assert!((ncc_cost(&w.negated(), &w).value - 2.0).abs() < 1e-12);
        let c = ncc_cost(&Image::constant(10, 12, 0.3), &w);
        assert_eq!(c.value, 1.0);
        assert!(c.degenerate);
    }

    #[test]
    fn windowed_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_image(&mut rng, 16, 16);
        let w = random_image(&mut rng, 16, 16);
        let full = windowed_cost(&u, &w, &SubWindow::full());
        assert_eq!(full, ncc_cost(&u, &w));

        // Equal inside the window, arbitrary outside.
        let win = SubWindow::new(0.25, 0.25, 0.75, 0.75);
        let mut u2 = random_image(&mut rng, 16, 16);
        for r in 4..12 {
            for c in 4..12 {
                u2.set(r, c, w.get(r, c));
            }
        }
        assert!(windowed_cost(&u2, &w, &win).value.abs() < 1e-12);

        let left = SubWindow::new(0.0, 0.0, 0.5, 1.0);
        let got = windowed_cost(&u, &w, &left).value;
        let expect = oracle_ncc(&crop_vals(&u, 0, 16, 0, 8), &crop_vals(&w, 0, 16, 0, 8));
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn fractional_windows_cover_bounds() {
        let r = SubWindow::new(0.02, 0.30, 0.25, 0.70).pixel_rect(24, 20);
        assert_eq!(r, PixelRect { row0: 7, row1: 17, col0: 0, col1: 5 });
    }

    #[test]
    fn combined_examples() {
        let t = smooth_template();
        assert!(combined_cost(t.patch(), &t).value.abs() < 1e-12);
        assert!((combined_cost(&t.patch().negated(), &t).value - 2.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_image(&mut rng, 24, 20);
        let p = t.patch();
        let gl = oracle_ncc(&u.to_f64(), &p.to_f64());
        let red = oracle_ncc(&crop_vals(&u, 7, 17, 0, 5), &crop_vals(p, 7, 17, 0, 5));
        let green = oracle_ncc(&crop_vals(&u, 7, 17, 15, 20), &crop_vals(p, 7, 17, 15, 20));
        let expect = 0.5 * (gl + red.max(green));
        assert!((combined_cost(&u, &t).value - expect).abs() < 1e-12);
    }

    #[test]
    fn matching_examples() {
        let t = smooth_template();
        let m = matching_loss(t.patch(), &t);
        assert!(m.value.abs() < 1e-10 && !m.negated);
        let m = matching_loss(&t.patch().negated(), &t);
        assert!(m.value.abs() < 1e-10 && m.negated);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            // 8-bit quantized intensities keep a·u + b exact in f32.
            let u = Image::from_fn(24, 20, |_, _| rng.random_range(0..256) as f32 / 256.0);
            let a = matching_loss(&u, &t).value;
            let b = matching_loss(&u.negated(), &t).value;
            assert!((a - b).abs() < 1e-12);
            for (scale, shift) in [(-3.0f32, 0.2f32), (-1.0, 0.0), (0.5, -1.0), (2.0, 5.0)] {
                let v = matching_loss(&u.map(|x| scale * x + shift), &t).value;
                assert!((v - a).abs() < 1e-8);
            }
            assert!((0.0..=2.0 + 1e-12).contains(&a));
        }
    }

    fn planted_pair(t: &Template, cfg: &ParamConfig, left: PoseParams, right: PoseParams) -> (Image, Image) {
        // Render the template's continuous bilinear interpolant into each half.
        let render = |pose: &PoseParams| {
            let inv = affine_matrix(pose, cfg.f).inverse().unwrap();
            let (h, w) = (96, 60);
            Image::from_fn(h, w, |r, c| {
                let x = -1.0 + 2.0 * c as f64 / (w - 1) as f64;
                let y = -1.0 + 2.0 * r as f64 / (h - 1) as f64;
                let (tx, ty) = inv.apply(x, y);
                crate::image::bilinear_sample(t.patch(), crate::image::NormCoord::new(tx, ty)) as f32
            })
        };
        (render(&left), render(&right))
    }

    #[test]
    fn pair_loss_examples() {
        let t = smooth_template();
        let cfg = t.param_config(&ParamConfig::default());
        let pose = PoseParams::new(0.5, 0.1, -0.05, 0.0);
        let (ul, ur) = planted_pair(&t, &cfg, pose, pose);
        let v0 = unconstrain(&pose, &cfg).unwrap().0;
        let v: [f64; 8] = [v0[0], v0[1], v0[2], v0[3], v0[0], v0[1], v0[2], v0[3]];
        let b = pair_loss(&ul, &ur, &v, &t, &cfg);
        assert_eq!(b.l_reg, 0.0);
        assert!(b.total < 5e-3, "planted total {}", b.total);
    }

    #[test]
    fn gradient_vanishes_at_exact_minimum() {
        // Bilinear sampling reproduces a linear intensity field exactly, so a
        // linear half and the template it induces give a zero-loss pose.
        let field = |x: f64, y: f64| 0.3 * x - 0.45 * y + 0.1;
        let cfg = ParamConfig::with_aspect(1.2);
        let pose = PoseParams::new(0.4, 0.1, -0.2, 0.03);
        let a = affine_matrix(&pose, cfg.f);
        let patch = Image::from_fn(24, 20, |r, c| {
            let (x, y) = a.apply(-1.0 + 2.0 * c as f64 / 19.0, -1.0 + 2.0 * r as f64 / 23.0);
            field(x, y) as f32
        });
        let t = Template::with_default_windows(patch).unwrap();
        let half = Image::from_fn(64, 40, |r, c| {
            field(-1.0 + 2.0 * c as f64 / 39.0, -1.0 + 2.0 * r as f64 / 63.0) as f32
        });
        let v0 = unconstrain(&pose, &cfg).unwrap().0;
        let v: [f64; 8] = std::array::from_fn(|i| v0[i % 4]);
        let (b, g) = pair_loss_grad(&half, &half, &v, &t, &cfg);
        assert!(b.total < 1e-10, "total {}", b.total);
        let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(gn < 1e-4, "gradient norm {gn}");
    }

    #[test]
    fn pair_loss_decomposes() {
        let t = smooth_template();
        let cfg = t.param_config(&ParamConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let ul = random_image(&mut rng, 50, 40);
            let ur = random_image(&mut rng, 50, 40);
            let v: [f64; 8] = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
            let b = pair_loss(&ul, &ur, &v, &t, &cfg);
            let (vl, vr) = split_v(&v);
            let pl = constrain(&vl, &cfg);
            let pr = constrain(&vr, &cfg);
            let l = matching_loss(&crate::image::warp_pose(&ul, &pl, cfg.f, 24, 20), &t);
            let r = matching_loss(&crate::image::warp_pose(&ur, &pr, cfg.f, 24, 20), &t);
            let reg = (pl.scale - pr.scale).powi(2) + (pl.ty - pr.ty).powi(2);
            // f32 narrowing in warp_pose bounds the agreement.
            assert!((b.l_left - l.value).abs() < 1e-5);
            assert!((b.l_right - r.value).abs() < 1e-5);
            assert!((b.l_reg - reg).abs() < 1e-15);
            assert_eq!(b.total, b.l_left + b.l_right + b.l_reg);
        }
    }

    proptest::proptest! {
        #[test]
        fn ncc_matches_oracle_and_ignores_affine_intensity(
            seed in 0u64..1000,
            a in 0.2f32..4.0,
            b in -2.0f32..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_image(&mut rng, 9, 11);
            let w = random_image(&mut rng, 9, 11);
            let base = ncc_cost(&u, &w).value;
            let oracle = oracle_ncc(&crop_vals(&u, 0, 9, 0, 11), &crop_vals(&w, 0, 9, 0, 11));
            proptest::prop_assert!((base - oracle).abs() < 1e-9);
            let shifted = Image::from_fn(9, 11, |r, c| a * u.get(r, c) + b);
            proptest::prop_assert!((ncc_cost(&shifted, &w).value - base).abs() < 1e-4);
        }

        #[test]
        fn matching_loss_is_sign_invariant_and_bounded(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = smooth_template();
            let u = random_image(&mut rng, t.height(), t.width());
            let l = matching_loss(&u, &t).value;
            proptest::prop_assert!((0.0..=1.5 + 1e-12).contains(&l));
            proptest::prop_assert!((matching_loss(&u.negated(), &t).value - l).abs() < 1e-12);
        }
    }
}
