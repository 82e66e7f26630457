//! Synthetic bilateral images with planted ground-truth poses.
//!
//! A procedural joint-like pattern (two bright bone ends separated by a dark
//! curved gap, with an asymmetric side blob) is rendered into each half at
//! the inverse of a chosen pose, over a background of low-frequency cosine
//! fields plus white noise. Warping a half by its planted pose recovers the
//! template up to the per-side intensity change and the noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::Result;
use crate::image::{horizontal_flip, Image};
use crate::loss::{SubWindow, Template};
use crate::param::{affine_matrix, ParamConfig, PoseParams};

/// Continuous joint-like intensity pattern in template coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointPattern {
    /// Logistic edge width in template units.
    pub edge: f64,
    /// Half-height of the dark gap.
    pub gap: f64,
    /// Curvature of the gap line.
    pub curvature: f64,
    pub bone: f64,
    pub tissue: f64,
}

impl Default for JointPattern {
    fn default() -> Self {
        JointPattern {
            edge: 0.07,
            gap: 0.14,
            curvature: 0.12,
            bone: 0.8,
            tissue: 0.3,
        }
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl JointPattern {
    pub fn value(&self, x: f64, y: f64) -> f64 {
        let e = self.edge;
        let line = self.curvature * x * x - 0.05;
        let femur = logistic(((line - self.gap) - y) / e) * logistic((0.78 - x.abs()) / e);
        let tibia_half_width = 0.88 - 0.12 * (y - line).max(0.0).min(1.5);
        let tibia = logistic((y - (line + self.gap)) / e) * logistic((tibia_half_width - x.abs()) / e);
        let notch = (-(x / 0.16).powi(2) - ((y - (line - self.gap - 0.2)) / 0.18).powi(2)).exp();
        let blob = (-((x - 0.9) / 0.1).powi(2) - ((y - 0.5) / 0.14).powi(2)).exp();
        let bone = self.bone - 0.12 * y.abs().min(1.5);
        let tissue = self.tissue + 0.04 * (1.3 * x).cos();
        tissue + (bone - tissue) * (femur + tibia + 0.7 * blob).min(1.0) - 0.3 * notch * femur
    }

    /// Samples the pattern over the frame `[-margin, margin]²` on an
    /// `h x w` grid.
    pub fn render(&self, h: usize, w: usize, margin: f64) -> Image {
        let axis = |i: usize, n: usize| {
            if n <= 1 {
                0.0
            } else {
                margin * (-1.0 + 2.0 * i as f64 / (n - 1) as f64)
            }
        };
        Image::from_fn(h, w, |r, c| self.value(axis(c, w), axis(r, h)) as f32)
    }

    /// Template over the unit frame with the default sub-windows.
    pub fn template(&self, h: usize, w: usize) -> Result<Template> {
        Template::with_default_windows(self.render(h, w, 1.0))
    }

    /// Template over a frame enlarged by `margin` (a coarse context view).
    pub fn coarse_template(&self, h: usize, w: usize, margin: f64) -> Result<Template> {
        Template::new(self.render(h, w, margin), SubWindow::default_red(), SubWindow::default_green())
    }
}

/// Background structure and noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub cosine_fields: usize,
    pub field_amplitude: f64,
    /// Standard deviation of additive Gaussian white noise.
    pub white: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            cosine_fields: 3,
            field_amplitude: 0.08,
            white: 0.02,
        }
    }
}

/// Planted pose and intensity change of one side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideSpec {
    pub pose: PoseParams,
    pub contrast: f64,
    pub brightness: f64,
    pub negate: bool,
}

impl SideSpec {
    pub fn plain(pose: PoseParams) -> Self {
        SideSpec {
            pose,
            contrast: 1.0,
            brightness: 0.0,
            negate: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub pattern: JointPattern,
    /// Template aspect height / width used by the planted poses.
    pub f: f64,
    pub half_height: usize,
    pub half_width: usize,
    pub left: SideSpec,
    pub right: SideSpec,
    pub noise: NoiseModel,
}

/// Planted poses of a generated pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub left: PoseParams,
    pub right: PoseParams,
    pub negate_left: bool,
    pub negate_right: bool,
}

/// Smooth 0..1 ramp between `lo` and `hi`.
fn smoothstep(lo: f64, hi: f64, x: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Full-weight pattern region (in template units) and fade-out end.
const ENVELOPE_INNER: f64 = 1.6;
const ENVELOPE_OUTER: f64 = 2.0;

struct CosineField {
    amp: f64,
    fx: f64,
    fy: f64,
    phase: f64,
}

fn render_side<R: Rng + ?Sized>(spec: &PlantSpec, side: &SideSpec, rng: &mut R) -> Image {
    let (h, w) = (spec.half_height, spec.half_width);
    let inv = affine_matrix(&side.pose, spec.f)
        .inverse()
        .expect("planted poses have positive scale");
    let fields: Vec<CosineField> = (0..spec.noise.cosine_fields)
        .map(|_| CosineField {
            amp: spec.noise.field_amplitude * rng.random_range(0.5..1.0),
            fx: rng.random_range(-1.2..1.2),
            fy: rng.random_range(-1.2..1.2),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let y = crate::image::pixel_to_norm_1d(r as f64, h);
        for c in 0..w {
            let x = crate::image::pixel_to_norm_1d(c as f64, w);
            let (tx, ty) = inv.apply(x, y);
            let weight = 1.0 - smoothstep(ENVELOPE_INNER, ENVELOPE_OUTER, tx.abs().max(ty.abs()));
            let background = spec.pattern.tissue
                + fields
                    .iter()
                    .map(|f| f.amp * (std::f64::consts::TAU * (f.fx * x + f.fy * y) + f.phase).cos())
                    .sum::<f64>();
            let clean = if weight > 0.0 {
                weight * spec.pattern.value(tx, ty) + (1.0 - weight) * background
            } else {
                background
            };
            let mut v = side.contrast * clean + side.brightness;
            if side.negate {
                v = -v;
            }
            let n: f64 = normal.sample(rng);
            data.push((v + spec.noise.white * n) as f32);
        }
    }
    Image::new(h, w, data).expect("rendered half is finite")
}

/// Renders both halves of a planted pair.
pub fn generate<R: Rng + ?Sized>(spec: &PlantSpec, rng: &mut R) -> (Image, Image, GroundTruth) {
    let left = render_side(spec, &spec.left, rng);
    let right = render_side(spec, &spec.right, rng);
    let truth = GroundTruth {
        left: spec.left.pose,
        right: spec.right.pose,
        negate_left: spec.left.negate,
        negate_right: spec.right.negate,
    };
    (left, right, truth)
}

/// Parameters of a random planted suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub half_height: usize,
    pub half_width: usize,
    pub template_height: usize,
    pub template_width: usize,
    pub pattern: JointPattern,
    pub noise: NoiseModel,
    pub scale_range: (f64, f64),
    /// Planted scales avoid these values by at least `off_grid_margin`.
    pub avoid_scales: Vec<f64>,
    pub off_grid_margin: f64,
    pub max_rotation: f64,
    /// Fraction of the admissible translation range used for centers.
    pub translation_fraction: f64,
    /// Relative scale difference between sides.
    pub side_scale_jitter: f64,
    pub side_vertical_jitter: f64,
    /// Largest horizontal offset of the right center from the left one.
    pub side_horizontal_jitter: f64,
    pub contrast_range: (f64, f64),
    pub brightness_range: (f64, f64),
    pub negate_probability: f64,
    /// Margin of the coarse template frame; planted poses keep the coarse
    /// frame inside the half as well.
    pub coarse_margin: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            half_height: 160,
            half_width: 100,
            template_height: 24,
            template_width: 20,
            pattern: JointPattern::default(),
            noise: NoiseModel::default(),
            scale_range: (0.2, 0.45),
            avoid_scales: Vec::new(),
            off_grid_margin: 0.0,
            max_rotation: 0.1,
            translation_fraction: 0.8,
            side_scale_jitter: 0.03,
            side_vertical_jitter: 0.04,
            side_horizontal_jitter: 0.2,
            contrast_range: (0.7, 1.5),
            brightness_range: (-0.2, 0.2),
            negate_probability: 0.0,
            coarse_margin: 1.4,
        }
    }
}

impl SuiteConfig {
    pub fn f(&self) -> f64 {
        self.template_height as f64 / self.template_width as f64
    }

    pub fn template(&self) -> Result<Template> {
        self.pattern.template(self.template_height, self.template_width)
    }

    pub fn coarse_template(&self) -> Result<Template> {
        self.pattern
            .coarse_template(self.template_height, self.template_width, self.coarse_margin)
    }

    pub fn param_config(&self) -> ParamConfig {
        ParamConfig::with_aspect(self.f())
    }

    fn sample_scale<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = self.scale_range;
        loop {
            let s = rng.random_range(lo..hi);
            if self
                .avoid_scales
                .iter()
                .all(|a| (s - a).abs() >= self.off_grid_margin)
            {
                return s;
            }
        }
    }

    /// Draws one planted specification.
    pub fn sample_spec<R: Rng + ?Sized>(&self, rng: &mut R) -> PlantSpec {
        let f = self.f();
        let k = self.coarse_margin.max(1.0);
        let scale = self.sample_scale(rng);
        let scale_r = scale * (1.0 + rng.random_range(-1.0..=1.0) * self.side_scale_jitter);
        let ty_range = |s: f64| (1.0 - k * s / f) * self.translation_fraction;
        let tx_range = |s: f64| (1.0 - k * s) * self.translation_fraction;
        let ty = rng.random_range(-1.0..=1.0) * ty_range(scale.max(scale_r));
        let ty_r = (ty + rng.random_range(-1.0..=1.0) * self.side_vertical_jitter)
            .clamp(-ty_range(scale_r), ty_range(scale_r));
        let tx = rng.random_range(-1.0..=1.0) * tx_range(scale.max(scale_r));
        let tx_r = (tx + rng.random_range(-1.0..=1.0) * self.side_horizontal_jitter)
            .clamp(-tx_range(scale_r), tx_range(scale_r));
        let mut side = |s: f64, tx: f64, ty: f64| SideSpec {
            pose: PoseParams::new(s, tx, ty, rng.random_range(-1.0..=1.0) * self.max_rotation),
            contrast: rng.random_range(self.contrast_range.0..=self.contrast_range.1),
            brightness: rng.random_range(self.brightness_range.0..=self.brightness_range.1),
            negate: rng.random_bool(self.negate_probability),
        };
        let left = side(scale, tx, ty);
        let right = side(scale_r, tx_r, ty_r);
        PlantSpec {
            pattern: self.pattern,
            f,
            half_height: self.half_height,
            half_width: self.half_width,
            left,
            right,
            noise: self.noise,
        }
    }
}

/// One generated pair with its truth.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub left: Image,
    pub right: Image,
    pub truth: GroundTruth,
}

/// Generates `n` pairs from `cfg`, deterministically for a given rng state.
pub fn generate_suite<R: Rng + ?Sized>(cfg: &SuiteConfig, n: usize, rng: &mut R) -> Vec<SynthPair> {
    (0..n)
        .map(|_| {
            let spec = cfg.sample_spec(rng);
            let (left, right, truth) = generate(&spec, rng);
            SynthPair { left, right, truth }
        })
        .collect()
}

/// Pose errors of one side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideMetrics {
    pub scale_error: f64,
    pub center_error: f64,
    pub rotation_error: f64,
    /// Mean distance between corresponding corners of the two rectangles.
    pub corner_distance: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub left: SideMetrics,
    pub right: SideMetrics,
    pub total: f64,
}

fn side_metrics(found: &PoseParams, truth: &PoseParams, f: f64, loss: f64) -> SideMetrics {
    let cf = found.corners(f);
    let ct = truth.corners(f);
    let corner_distance = cf
        .iter()
        .zip(&ct)
        .map(|(a, b)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
        .sum::<f64>()
        / 4.0;
    SideMetrics {
        scale_error: (found.scale - truth.scale).abs(),
        center_error: ((found.tx - truth.tx).powi(2) + (found.ty - truth.ty).powi(2)).sqrt(),
        rotation_error: (found.rot - truth.rot).abs(),
        corner_distance,
        loss,
    }
}

/// Compares a detection against the planted truth.
pub fn score(det: &Detection, truth: &GroundTruth, f: f64) -> Metrics {
    Metrics {
        left: side_metrics(&det.left.pose, &truth.left, f, det.left.loss),
        right: side_metrics(&det.right.pose, &truth.right, f, det.right.loss),
        total: det.total,
    }
}

/// A bilateral composite with known landmark positions, for exercising the
/// split pipeline.
#[derive(Clone, Debug)]
pub struct Composite {
    pub image: Image,
    /// Landmark `(row, col)` pixel positions in the left and right parts.
    pub markers: [(usize, usize); 2],
}

/// Builds `[flip(left) | right]` side by side and stamps a bright single-pixel
/// marker into each part.
pub fn bilateral_composite<R: Rng + ?Sized>(
    cfg: &SuiteConfig,
    height: usize,
    part_width: usize,
    rng: &mut R,
) -> Composite {
    let half_cfg = SuiteConfig {
        half_height: height,
        half_width: part_width,
        ..cfg.clone()
    };
    let spec = half_cfg.sample_spec(rng);
    let (left, right, _) = generate(&spec, rng);
    let left = horizontal_flip(&left);
    let width = 2 * part_width;
    let mut image = Image::from_fn(height, width, |r, c| {
        if c < part_width {
            left.get(r, c)
        } else {
            right.get(r, c - part_width)
        }
    });
    let row_l = rng.random_range(height / 4..3 * height / 4);
    let col_l = rng.random_range(part_width / 4..3 * part_width / 4);
    let row_r = rng.random_range(height / 4..3 * height / 4);
    let col_r = part_width + rng.random_range(part_width / 4..3 * part_width / 4);
    let (_, hi) = image.min_max();
    image.set(row_l, col_l, hi + 5.0);
    image.set(row_r, col_r, hi + 5.0);
    Composite {
        image,
        markers: [(row_l, col_l), (row_r, col_r)],
    }
}
