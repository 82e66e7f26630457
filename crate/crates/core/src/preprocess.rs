//! Splitting a bilateral radiograph into two same-orientation halves.
//!
//! The split column is chosen by mirror symmetry on a downsampled copy. Each
//! half is widened toward the other side, padded to a common width and then
//! to a fixed aspect, resized, and the left half is flipped horizontally. A
//! [`HalfTransform`] per side maps coordinates back to the input image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detection::PixelQuad;
use crate::error::{Error, Result};
use crate::image::{horizontal_flip, norm_to_pixel_1d, pad_zeros, pixel_to_norm_1d, resize, Image};
use crate::param::PoseParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Width of the copy used to choose the split column.
    pub down_width: usize,
    /// Number of split candidates, equispaced over the candidate span.
    pub split_candidates: usize,
    /// Candidates lie within this fraction of the width from the center.
    pub candidate_offset: f64,
    pub widen: f64,
    /// Height over width of the padded halves.
    pub aspect: f64,
    pub out_height: usize,
    pub out_width: usize,
    pub max_shift: f64,
    /// Inputs taller than this height/width ratio are treated as single-side
    /// images and rejected.
    pub max_input_aspect: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            down_width: 128,
            split_candidates: 2,
            candidate_offset: 0.125,
            widen: 1.1,
            aspect: 1.6,
            out_height: 800,
            out_width: 500,
            max_shift: 0.02,
            max_input_aspect: 1.25,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.down_width >= 4
            && self.split_candidates >= 1
            && (0.0..0.5).contains(&self.candidate_offset)
            && self.widen >= 1.0
            && self.aspect > 0.0
            && self.out_height >= 2
            && self.out_width >= 2
            && (0.0..=0.1).contains(&self.max_shift)
            && self.max_input_aspect > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("preprocess {self:?}")))
        }
    }
}

/// Mean absolute difference between the `w` columns left of `a` and the
/// mirrored `w` columns right of it.
fn mirror_distance(img: &Image, a: usize) -> f64 {
    let w = a.min(img.width() - a);
    if w == 0 {
        return f64::INFINITY;
    }
    let mut total = 0.0;
    for r in 0..img.height() {
        for k in 0..w {
            total += (img.get(r, a - 1 - k) - img.get(r, a + k)).abs() as f64;
        }
    }
    total / (w * img.height()) as f64
}

/// Candidate split columns of an image `width` pixels wide.
fn split_candidates(width: usize, count: usize, offset: f64) -> Vec<usize> {
    let center = width as f64 / 2.0;
    let span = offset * width as f64;
    (0..count)
        .map(|i| {
            let a = if count == 1 {
                center
            } else {
                center - span + 2.0 * span * i as f64 / (count - 1) as f64
            };
            (a.round() as usize).clamp(1, width - 1)
        })
        .collect()
}

/// Split column (in full-resolution pixels) with the smallest mirror
/// distance; ties go to the leftmost candidate.
pub fn find_split(u: &Image, cfg: &PreprocessConfig) -> Result<usize> {
    if u.width() < 4 {
        return Err(Error::ImageTooSmall(format!("width {} < 4", u.width())));
    }
    let small = if u.width() > cfg.down_width {
        let h = ((u.height() as f64 * cfg.down_width as f64 / u.width() as f64).round() as usize).max(1);
        resize(u, h, cfg.down_width)?
    } else {
        u.clone()
    };
    let mut best: Option<(usize, f64)> = None;
    for a in split_candidates(small.width(), cfg.split_candidates, cfg.candidate_offset) {
        let d = mirror_distance(&small, a);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((a, d));
        }
    }
    let (a, _) = best.expect("at least one candidate");
    let full = (a as f64 * u.width() as f64 / small.width() as f64).round() as usize;
    Ok(full.clamp(1, u.width() - 1))
}

/// Geometry that maps a processed half back into the input image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfTransform {
    /// Input column of the cropped half's first column.
    pub crop_col: usize,
    pub crop_width: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub flipped: bool,
}

impl HalfTransform {
    /// The transform of a half that is its own input image.
    pub fn identity(height: usize, width: usize) -> Self {
        HalfTransform {
            crop_col: 0,
            crop_width: width,
            pad_top: 0,
            pad_left: 0,
            padded_height: height,
            padded_width: width,
            out_height: height,
            out_width: width,
            flipped: false,
        }
    }

    /// Output pixel `(row, col)` to input pixel `(row, col)`.
    pub fn to_original(&self, row: f64, col: f64) -> (f64, f64) {
        let col = if self.flipped {
            (self.out_width - 1) as f64 - col
        } else {
            col
        };
        let pr = row * (self.padded_height - 1) as f64 / (self.out_height - 1) as f64;
        let pc = col * (self.padded_width - 1) as f64 / (self.out_width - 1) as f64;
        (pr - self.pad_top as f64, pc - self.pad_left as f64 + self.crop_col as f64)
    }

    /// Input pixel `(row, col)` to output pixel `(row, col)`.
    pub fn from_original(&self, row: f64, col: f64) -> (f64, f64) {
        let pr = row + self.pad_top as f64;
        let pc = col - self.crop_col as f64 + self.pad_left as f64;
        let r = pr * (self.out_height - 1) as f64 / (self.padded_height - 1) as f64;
        let c = pc * (self.out_width - 1) as f64 / (self.padded_width - 1) as f64;
        let c = if self.flipped {
            (self.out_width - 1) as f64 - c
        } else {
            c
        };
        (r, c)
    }

    /// Corners of a pose rectangle as input-image `[x, y]` pixel positions.
    pub fn pose_quad(&self, pose: &PoseParams, f: f64) -> PixelQuad {
        pose.corners(f).map(|(x, y)| {
            let col = norm_to_pixel_1d(x, self.out_width);
            let row = norm_to_pixel_1d(y, self.out_height);
            let (r, c) = self.to_original(row, col);
            [c, r]
        })
    }

    /// Normalized half coordinates of an input pixel.
    pub fn norm_of_original(&self, row: f64, col: f64) -> (f64, f64) {
        let (r, c) = self.from_original(row, col);
        (pixel_to_norm_1d(c, self.out_width), pixel_to_norm_1d(r, self.out_height))
    }
}

/// The two processed halves and their geometry.
#[derive(Clone, Debug)]
pub struct SplitResult {
    pub u_left: Image,
    pub u_right: Image,
    pub split_column: usize,
    pub left_transform: HalfTransform,
    pub right_transform: HalfTransform,
    /// Padded halves before resizing, left one not yet flipped.
    pub padded: [Image; 2],
}

/// The transforms sidecar written next to processed halves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub split_column: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub left: HalfTransform,
    pub right: HalfTransform,
}

impl SplitResult {
    pub fn record(&self, input_height: usize, input_width: usize) -> TransformRecord {
        TransformRecord {
            split_column: self.split_column,
            input_height,
            input_width,
            left: self.left_transform,
            right: self.right_transform,
        }
    }
}

/// Splits, widens, pads to the configured aspect, resizes and flips the left
/// half.
///
/// Inputs taller than `max_input_aspect` (for instance one of this
/// function's own outputs) are rejected with [`Error::DegenerateInput`].
pub fn split_bilateral(u: &Image, cfg: &PreprocessConfig) -> Result<SplitResult> {
    cfg.validate()?;
    let (h, w) = u.shape();
    if h as f64 / w as f64 > cfg.max_input_aspect {
        return Err(Error::DegenerateInput(format!(
            "height/width {:.3} exceeds {} (single-side image?)",
            h as f64 / w as f64,
            cfg.max_input_aspect
        )));
    }
    let a = find_split(u, cfg)?;
    let left_w = ((cfg.widen * a as f64).ceil() as usize).min(w);
    let right_w = ((cfg.widen * (w - a) as f64).ceil() as usize).min(w);
    if left_w < 8 || right_w < 8 {
        return Err(Error::ImageTooSmall(format!(
            "halves of width {left_w} and {right_w} (need at least 8)"
        )));
    }
    let right_col = w - right_w;
    let left = u.crop(0, 0, h, left_w);
    let right = u.crop(0, right_col as isize, h, right_w);

    let common_w = left_w.max(right_w);
    let (pad_h, pad_w) = aspect_padding(h, common_w, cfg.aspect);
    let mut transforms = Vec::with_capacity(2);
    let mut padded = Vec::with_capacity(2);
    for (img, crop_col, crop_w, flipped) in [(left, 0, left_w, true), (right, right_col, right_w, false)] {
        let side_pad = common_w - crop_w;
        let pad_left = side_pad / 2 + pad_w / 2;
        let pad_right = side_pad - side_pad / 2 + pad_w - pad_w / 2;
        let pad_top = pad_h / 2;
        let pad_bottom = pad_h - pad_h / 2;
        let p = pad_zeros(&img, pad_top, pad_bottom, pad_left, pad_right);
        transforms.push(HalfTransform {
            crop_col,
            crop_width: crop_w,
            pad_top,
            pad_left,
            padded_height: p.height(),
            padded_width: p.width(),
            out_height: cfg.out_height,
            out_width: cfg.out_width,
            flipped,
        });
        padded.push(p);
    }
    let u_left = horizontal_flip(&resize(&padded[0], cfg.out_height, cfg.out_width)?);
    let u_right = resize(&padded[1], cfg.out_height, cfg.out_width)?;
    let right_pad = padded.pop().expect("two halves");
    let left_pad = padded.pop().expect("two halves");
    Ok(SplitResult {
        u_left,
        u_right,
        split_column: a,
        left_transform: transforms[0],
        right_transform: transforms[1],
        padded: [left_pad, right_pad],
    })
}

/// Rows and columns of zero padding that bring `h x w` to `aspect`.
fn aspect_padding(h: usize, w: usize, aspect: f64) -> (usize, usize) {
    let ratio = h as f64 / w as f64;
    if ratio > aspect {
        let target_w = (h as f64 / aspect).round() as usize;
        (0, target_w.saturating_sub(w))
    } else {
        let target_h = (aspect * w as f64).round() as usize;
        (target_h.saturating_sub(h), 0)
    }
}

/// Random integer translation of up to `max_shift` of each dimension, zero
/// filled.
pub fn augment<R: Rng + ?Sized>(half: &Image, rng: &mut R, max_shift: f64) -> Result<Image> {
    if !(0.0..=0.1).contains(&max_shift) {
        return Err(Error::InvalidConfig(format!("max_shift {max_shift} outside [0, 0.1]")));
    }
    let my = (max_shift * half.height() as f64).floor() as i64;
    let mx = (max_shift * half.width() as f64).floor() as i64;
    let dy = rng.random_range(-my..=my);
    let dx = rng.random_range(-mx..=mx);
    Ok(half.translate(dy as isize, dx as isize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> PreprocessConfig {
        PreprocessConfig {
            out_height: 80,
            out_width: 50,
            ..PreprocessConfig::default()
        }
    }

    #[test]
    fn constant_image_splits_left() {
        let img = Image::constant(20, 64, 0.3);
        let a = find_split(&img, &PreprocessConfig::default()).unwrap();
        assert_eq!(a, 24);
    }

    #[test]
    fn mirrored_left_block_wins() {
        // Columns 0..24 mirror columns 24..48 about column 24 (= 3/8 of 64).
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let right: Vec<f32> = (0..40 * 20).map(|_| rng.random_range(0.0..1.0)).collect();
        let img = Image::from_fn(20, 64, |r, c| {
            if c < 24 {
                right[r * 40 + (23 - c)]
            } else {
                right[r * 40 + (c - 24)]
            }
        });
        let cfg = PreprocessConfig::default();
        let d_left = mirror_distance(&img, 24);
        let d_right = mirror_distance(&img, 40);
        assert_eq!(d_left, 0.0);
        assert!(d_right > 0.0);
        assert_eq!(find_split(&img, &cfg).unwrap(), 24);
    }

    #[test]
    fn halves_have_target_shape_and_aspect() {
        let img = Image::from_fn(160, 200, |r, c| ((r * 7 + c * 3) % 11) as f32);
        let cfg = small_cfg();
        let s = split_bilateral(&img, &cfg).unwrap();
        assert_eq!(s.u_left.shape(), (80, 50));
        assert_eq!(s.u_right.shape(), (80, 50));
        for p in &s.padded {
            let ratio = p.height() as f64 / p.width() as f64;
            assert!((ratio - 1.6).abs() <= 1.6 / p.width() as f64 + 1e-12, "{ratio}");
        }
    }

    #[test]
    fn full_size_dimensions() {
        let img = Image::from_fn(1600, 2000, |r, c| ((r + 2 * c) % 13) as f32);
        let s = split_bilateral(&img, &PreprocessConfig::default()).unwrap();
        assert_eq!(s.u_left.shape(), (800, 500));
        assert_eq!(s.u_right.shape(), (800, 500));
    }

    #[test]
    fn second_split_is_rejected() {
        let img = Image::from_fn(160, 200, |r, c| ((r * 7 + c * 3) % 11) as f32);
        let s = split_bilateral(&img, &small_cfg()).unwrap();
        let again = split_bilateral(&s.u_left, &small_cfg());
        assert!(matches!(again, Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn halves_overlap_by_widening() {
        let img = Image::from_fn(100, 300, |r, c| ((r * 5 + c) % 17) as f32);
        let s = split_bilateral(&img, &small_cfg()).unwrap();
        let l = s.left_transform;
        let r = s.right_transform;
        let overlap = (l.crop_col + l.crop_width) as isize - r.crop_col as isize;
        let narrow = l.crop_width.min(r.crop_width) as f64 / 1.1;
        assert!(overlap as f64 >= 0.1 * narrow - 1.0, "overlap {overlap}");
    }

    #[test]
    fn transform_round_trip() {
        let img = Image::from_fn(120, 260, |r, c| ((r * 3 + c) % 7) as f32);
        let s = split_bilateral(&img, &small_cfg()).unwrap();
        for t in [s.left_transform, s.right_transform] {
            for &(r, c) in &[(10.0, 5.0), (40.5, 33.25), (79.0, 49.0)] {
                let (or, oc) = t.to_original(r, c);
                let (br, bc) = t.from_original(or, oc);
                assert!((br - r).abs() < 1e-9 && (bc - c).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn flipped_left_half_reads_mirrored_input() {
        let img = Image::from_fn(100, 200, |r, c| (r * 200 + c) as f32);
        let cfg = PreprocessConfig {
            out_height: 100,
            out_width: 100,
            ..small_cfg()
        };
        let s = split_bilateral(&img, &cfg).unwrap();
        let t = s.left_transform;
        let (r, c) = t.from_original(50.0, 20.0);
        assert!(c > (t.out_width as f64) / 2.0, "left side of input lands on the right after flipping");
        let (or, oc) = t.to_original(r, c);
        assert!((or - 50.0).abs() < 1e-9 && (oc - 20.0).abs() < 1e-9);
    }

    #[test]
    fn augment_identity_and_bounds() {
        let img = Image::from_fn(50, 40, |r, c| (r + c) as f32 + 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&img, &mut rng, 0.0).unwrap(), img);
        assert!(augment(&img, &mut rng, 0.2).is_err());
        let nonzero = |i: &Image| i.data().iter().filter(|v| **v != 0.0).count();
        for _ in 0..20 {
            let a = augment(&img, &mut rng, 0.1).unwrap();
            assert!(nonzero(&a) <= nonzero(&img));
        }
    }

    #[test]
    fn shift_and_back_zeroes_border_band() {
        let img = Image::from_fn(20, 20, |r, c| (r * 20 + c) as f32 + 1.0);
        let back = img.translate(5, 0).translate(-5, 0);
        for r in 0..20 {
            for c in 0..20 {
                let expect = if r >= 15 { 0.0 } else { img.get(r, c) };
                assert_eq!(back.get(r, c), expect);
            }
        }
    }
}
