//! Grayscale rasters, the bilinear sampler and affine warps.
//!
//! Pixel centers map to normalized coordinates with the align-corners
//! convention: column `j` of a `w`-wide image sits at `x = -1 + 2j/(w-1)`
//! (and at `x = 0` when `w == 1`). Rows follow the same rule on `y`. The
//! sampler, the regular grid and the analytic Jacobian all share this mapping.
//! Points outside the image read zero-padded surroundings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{affine_matrix, AffineMatrix, PoseParams};

/// Dense single-channel raster stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// A point in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormCoord {
    pub x: f64,
    pub y: f64,
}

impl NormCoord {
    pub fn new(x: f64, y: f64) -> Self {
        NormCoord { x, y }
    }
}

/// Derivatives of sampled intensities with respect to the four pose
/// components `(scale, tx, ty, rot)`, one row per output pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpJacobian {
    pub height: usize,
    pub width: usize,
    pub rows: Vec<[f64; 4]>,
}

impl WarpJacobian {
    /// Column `k` of the Jacobian as a flat row-major map.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[k]).collect()
    }
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {height}x{width}, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite intensity at index {i}")));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Builds an image from f64 values, narrowing to storage precision.
    pub fn from_f64(height: usize, width: usize, data: &[f64]) -> Result<Self> {
        Image::new(height, width, data.iter().map(|&v| v as f32).collect())
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        Image {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        let mut img = Image::zeros(height, width);
        img.data.fill(value);
        img
    }

    /// Builds an image by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.width + col] = value;
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Applies `f` to every intensity.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn negated(&self) -> Image {
        self.map(|v| -v)
    }

    /// Copies the pixel rectangle `[top, top+height) x [left, left+width)`;
    /// pixels outside the source read zero.
    pub fn crop(&self, top: isize, left: isize, height: usize, width: usize) -> Image {
        Image::from_fn(height, width, |r, c| {
            let sr = top + r as isize;
            let sc = left + c as isize;
            if sr < 0 || sc < 0 || sr >= self.height as isize || sc >= self.width as isize {
                0.0
            } else {
                self.get(sr as usize, sc as usize)
            }
        })
    }

    /// Integer translation by `(dy, dx)` pixels with zero fill.
    pub fn translate(&self, dy: isize, dx: isize) -> Image {
        self.crop(-dy, -dx, self.height, self.width)
    }

    /// Normalized coordinate of pixel `(row, col)`.
    pub fn pixel_to_norm(&self, row: f64, col: f64) -> NormCoord {
        NormCoord::new(
            pixel_to_norm_1d(col, self.width),
            pixel_to_norm_1d(row, self.height),
        )
    }

    /// Fractional `(row, col)` of a normalized coordinate.
    pub fn norm_to_pixel(&self, p: NormCoord) -> (f64, f64) {
        (norm_to_pixel_1d(p.y, self.height), norm_to_pixel_1d(p.x, self.width))
    }
}

#[inline]
pub(crate) fn pixel_to_norm_1d(pixel: f64, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * pixel / (n - 1) as f64
    }
}

#[inline]
pub(crate) fn norm_to_pixel_1d(x: f64, n: usize) -> f64 {
    (x + 1.0) * 0.5 * n.saturating_sub(1) as f64
}

/// Normalized coordinates of `n` equispaced samples over `[-1, 1]`.
pub(crate) fn grid_axis(n: usize) -> Vec<f64> {
    (0..n).map(|i| pixel_to_norm_1d(i as f64, n)).collect()
}

/// Row-major grid of `out_h * out_w` points equispaced over `[-1, 1]²`.
pub fn make_regular_grid(out_h: usize, out_w: usize) -> Vec<NormCoord> {
    let xs = grid_axis(out_w);
    let ys = grid_axis(out_h);
    let mut grid = Vec::with_capacity(out_h * out_w);
    for &y in &ys {
        for &x in &xs {
            grid.push(NormCoord::new(x, y));
        }
    }
    grid
}

/// Value and pixel-space gradient `(d/dcol, d/drow)` of the bilinear
/// interpolant at fractional pixel position `(py, px)`.
#[inline(always)]
fn bilinear_at(img: &Image, py: f64, px: f64) -> (f64, f64, f64) {
    let (h, w) = (img.height as isize, img.width as isize);
    if !(px >= -1.0 && px < w as f64 && py >= -1.0 && py < h as f64) {
        let nan = px.is_nan() || py.is_nan();
        return if nan { (f64::NAN, f64::NAN, f64::NAN) } else { (0.0, 0.0, 0.0) };
    }
    // SAFETY: both shifted coordinates are finite and in [0, dim + 1).
    let x0 = unsafe { (px + 1.0).to_int_unchecked::<i32>() } as isize - 1;
    let y0 = unsafe { (py + 1.0).to_int_unchecked::<i32>() } as isize - 1;
    let x0f = x0 as f64;
    let y0f = y0 as f64;
    let fx = px - x0f;
    let fy = py - y0f;
    let data = &img.data;
    let (v00, v01, v10, v11);
    if x0 >= 0 && y0 >= 0 && x0 + 1 < w && y0 + 1 < h {
        let i = (y0 * w + x0) as usize;
        let wu = w as usize;
        v00 = data[i] as f64;
        v01 = data[i + 1] as f64;
        v10 = data[i + wu] as f64;
        v11 = data[i + wu + 1] as f64;
    } else {
        let at = |r: isize, c: isize| -> f64 {
            if r < 0 || c < 0 || r >= h || c >= w {
                0.0
            } else {
                data[(r * w + c) as usize] as f64
            }
        };
        v00 = at(y0, x0);
        v01 = at(y0, x0 + 1);
        v10 = at(y0 + 1, x0);
        v11 = at(y0 + 1, x0 + 1);
    }
    let top = v00 + fx * (v01 - v00);
    let bottom = v10 + fx * (v11 - v10);
    let value = top + fy * (bottom - top);
    let d_col = (v01 - v00) + fy * ((v11 - v10) - (v01 - v00));
    let d_row = bottom - top;
    (value, d_col, d_row)
}

/// Bilinear interpolation at a normalized coordinate, zero-padded outside.
pub fn bilinear_sample(img: &Image, p: NormCoord) -> f64 {
    let px = norm_to_pixel_1d(p.x, img.width);
    let py = norm_to_pixel_1d(p.y, img.height);
    bilinear_at(img, py, px).0
}

/// Samples `img` at `A·[x, 1]` for every point of the `out_h x out_w`
/// regular grid, at full f64 precision.
pub fn warp_values(img: &Image, a: &AffineMatrix, out_h: usize, out_w: usize) -> Vec<f64> {
    let xs = grid_axis(out_w);
    let ys = grid_axis(out_h);
    let m = &a.0;
    let sx = 0.5 * img.width.saturating_sub(1) as f64;
    let sy = 0.5 * img.height.saturating_sub(1) as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for &y in &ys {
        let bx = m[0][1] * y + m[0][2];
        let by = m[1][1] * y + m[1][2];
        for &x in &xs {
            let nx = m[0][0] * x + bx;
            let ny = m[1][0] * x + by;
            out.push(bilinear_at(img, (ny + 1.0) * sy, (nx + 1.0) * sx).0);
        }
    }
    out
}

/// Affine warp of `img` onto an `out_h x out_w` regular grid.
pub fn warp(img: &Image, a: &AffineMatrix, out_h: usize, out_w: usize) -> Image {
    let values = warp_values(img, a, out_h, out_w);
    Image {
        height: out_h,
        width: out_w,
        data: values.into_iter().map(|v| v as f32).collect(),
    }
}

/// Warp by `A(θ)` together with the derivative of every sample with respect
/// to `θ`, writing into caller-owned buffers.
pub fn warp_pose_with_grad_into(
    img: &Image,
    pose: &PoseParams,
    f: f64,
    out_h: usize,
    out_w: usize,
    values: &mut Vec<f64>,
    jac: &mut Vec<[f64; 4]>,
) {
    let (sin, cos) = pose.rot.sin_cos();
    let s = pose.scale;
    let inv_f = 1.0 / f;
    let sx = 0.5 * img.width.saturating_sub(1) as f64;
    let sy = 0.5 * img.height.saturating_sub(1) as f64;
    let (w, wm1, hm1) = (img.width, img.width as f64 - 1.0, img.height as f64 - 1.0);
    let data = &img.data;
    let xs = grid_axis(out_w);
    let ys = grid_axis(out_h);
    values.resize(out_h * out_w, 0.0);
    jac.resize(out_h * out_w, [0.0; 4]);
    let mut k = 0;
    let (sf, s_inv_f) = (s * f, s * inv_f);
    let (drx, dry) = (cos, sin * inv_f);
    let (dpx, dpy) = (s * drx * sx, s * dry * sy);
    for &y in &ys {
        // Rotated unit-scale offsets; p = t + s·D·R·x with D = diag(1, 1/f).
        let (rx0, ry0) = (-sin * y, cos * y * inv_f);
        let (px0, py0) = ((s * rx0 + pose.tx + 1.0) * sx, (s * ry0 + pose.ty + 1.0) * sy);
        for &x in &xs {
            let rx = rx0 + drx * x;
            let ry = ry0 + dry * x;
            let px = px0 + dpx * x;
            let py = py0 + dpy * x;
            let (v, d_col, d_row) = if px >= 0.0 && px < wm1 && py >= 0.0 && py < hm1 {
                // SAFETY: both coordinates are finite and inside the image.
                let (c0, r0) = unsafe { (px.to_int_unchecked::<usize>(), py.to_int_unchecked::<usize>()) };
                let (fx, fy) = (px - c0 as f64, py - r0 as f64);
                let i = r0 * w + c0;
                let (v00, v01) = (data[i] as f64, data[i + 1] as f64);
                let (v10, v11) = (data[i + w] as f64, data[i + w + 1] as f64);
                let top = v00 + fx * (v01 - v00);
                let bottom = v10 + fx * (v11 - v10);
                (top + fy * (bottom - top), (v01 - v00) + fy * ((v11 - v10) - (v01 - v00)), bottom - top)
            } else {
                bilinear_at(img, py, px)
            };
            let gx = d_col * sx;
            let gy = d_row * sy;
            // d(rx)/d(rot) = -(sin x + cos y) = -f·ry, d(ry)/d(rot) = rx / f.
            values[k] = v;
            jac[k] = [gx * rx + gy * ry, gx, gy, gy * rx * s_inv_f - gx * sf * ry];
            k += 1;
        }
    }
}

/// Warp by `A(θ)` returning the f64 samples and their pose Jacobian.
pub fn warp_pose_with_grad(
    img: &Image,
    pose: &PoseParams,
    f: f64,
    out_h: usize,
    out_w: usize,
) -> (Vec<f64>, WarpJacobian) {
    let mut values = Vec::new();
    let mut rows = Vec::new();
    warp_pose_with_grad_into(img, pose, f, out_h, out_w, &mut values, &mut rows);
    (
        values,
        WarpJacobian {
            height: out_h,
            width: out_w,
            rows,
        },
    )
}

/// Warp by `A(θ)` and the Jacobian of the warped intensities w.r.t. `θ`.
pub fn warp_with_grad(
    img: &Image,
    pose: &PoseParams,
    f: f64,
    out_h: usize,
    out_w: usize,
) -> (Image, WarpJacobian) {
    let (values, jac) = warp_pose_with_grad(img, pose, f, out_h, out_w);
    let out = Image {
        height: out_h,
        width: out_w,
        data: values.into_iter().map(|v| v as f32).collect(),
    };
    (out, jac)
}

/// Convenience: warp by the pose's affine matrix.
pub fn warp_pose(img: &Image, pose: &PoseParams, f: f64, out_h: usize, out_w: usize) -> Image {
    warp(img, &affine_matrix(pose, f), out_h, out_w)
}

/// Bilinear resize (an identity warp onto the new grid).
pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidImage(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    Ok(warp(img, &AffineMatrix::identity(), out_h, out_w))
}

/// Reverses the column order.
pub fn horizontal_flip(img: &Image) -> Image {
    let w = img.width;
    Image::from_fn(img.height, w, |r, c| img.get(r, w - 1 - c))
}

/// Extends the image with zero rows and columns.
pub fn pad_zeros(img: &Image, top: usize, bottom: usize, left: usize, right: usize) -> Image {
    let h = img.height + top + bottom;
    let w = img.width + left + right;
    let mut out = Image::zeros(h, w);
    for r in 0..img.height {
        let src = &img.data[r * img.width..(r + 1) * img.width];
        let start = (r + top) * w + left;
        out.data[start..start + img.width].copy_from_slice(src);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::PoseParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: explicit four-neighbour weighting with bounds
    /// checks per neighbour, written without the fast path.
    fn naive_sample(img: &Image, x: f64, y: f64) -> f64 {
        let col = (x + 1.0) / 2.0 * (img.width() as f64 - 1.0);
        let row = (y + 1.0) / 2.0 * (img.height() as f64 - 1.0);
        let c0 = col.floor();
        let r0 = row.floor();
        let mut acc = 0.0;
        for (dr, dc) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
            let rr = r0 + dr;
            let cc = c0 + dc;
            let wr = 1.0 - (row - rr).abs();
            let wc = 1.0 - (col - cc).abs();
            if rr >= 0.0 && cc >= 0.0 && rr < img.height() as f64 && cc < img.width() as f64 {
                acc += wr * wc * img.get(rr as usize, cc as usize) as f64;
            }
        }
        acc
    }

    fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |_, _| rng.random::<f32>())
    }

    fn two_by_two() -> Image {
        Image::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn sampler_examples() {
        let img = two_by_two();
        assert_eq!(bilinear_sample(&img, NormCoord::new(-1.0, -1.0)), 0.0);
        assert!((bilinear_sample(&img, NormCoord::new(0.0, 0.0)) - 1.5).abs() < 1e-12);
        assert_eq!(bilinear_sample(&img, NormCoord::new(3.0, 3.0)), 0.0);
        assert!((bilinear_sample(&img, NormCoord::new(1.0, 1.0)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn border_samples_use_partial_weights() {
        let img = Image::constant(3, 3, 1.0);
        // Half a pixel beyond the right edge: half the weight reads padding.
        let v = bilinear_sample(&img, NormCoord::new(1.5, 0.0));
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn grid_examples() {
        assert_eq!(make_regular_grid(1, 1), vec![NormCoord::new(0.0, 0.0)]);
        let g = make_regular_grid(2, 2);
        let expect = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];
        for (p, (x, y)) in g.iter().zip(expect) {
            assert_eq!((p.x, p.y), (x, y));
        }
        let g = make_regular_grid(3, 3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[4], NormCoord::new(0.0, 0.0));
    }

    #[test]
    fn identity_warp_reproduces_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 17, 23);
        let out = warp(&img, &AffineMatrix::identity(), 17, 23);
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn warp_of_constant_is_constant() {
        let img = Image::constant(20, 30, 0.7);
        let a = AffineMatrix([[0.5, 0.0, 0.0], [0.0, 0.5, 0.0]]);
        let out = warp(&img, &a, 11, 9);
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn warp_matches_naive_oracle_on_ramp() {
        let img = Image::from_fn(64, 64, |r, c| (r as f32 * 0.01 + c as f32 * 0.02).sin());
        let a = AffineMatrix([[0.5, 0.0, 0.5], [0.0, 0.5, 0.0]]);
        let out = warp_values(&img, &a, 64, 64);
        for (i, p) in make_regular_grid(64, 64).iter().enumerate() {
            let (x, y) = (0.5 * p.x + 0.5, 0.5 * p.y);
            assert!((out[i] - naive_sample(&img, x, y)).abs() < 1e-6);
        }
    }

    #[test]
    fn sampler_matches_oracle_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 13, 9);
        for _ in 0..2000 {
            let x = rng.random_range(-1.5..1.5);
            let y = rng.random_range(-1.5..1.5);
            let v = bilinear_sample(&img, NormCoord::new(x, y));
            assert!((v - naive_sample(&img, x, y)).abs() < 1e-9, "at ({x},{y})");
        }
    }

    #[test]
    fn resize_checkerboard_matches_oracle() {
        let img = Image::from_fn(4, 4, |r, c| ((r + c) % 2) as f32);
        let out = resize(&img, 8, 8).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let p = out.pixel_to_norm(r as f64, c as f64);
                assert!((out.get(r, c) as f64 - naive_sample(&img, p.x, p.y)).abs() < 1e-6);
            }
        }
        assert!(resize(&img, 0, 3).is_err());
    }

    #[test]
    fn flip_and_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 5, 7);
        assert_eq!(horizontal_flip(&horizontal_flip(&img)), img);
        assert_eq!(pad_zeros(&img, 0, 0, 0, 0), img);
        let p = pad_zeros(&img, 1, 2, 3, 4);
        assert_eq!(p.shape(), (8, 14));
        assert_eq!(p.get(1, 3), img.get(0, 0));
        assert_eq!(p.get(0, 0), 0.0);
    }

    #[test]
    fn constant_image_has_zero_jacobian() {
        let img = Image::constant(30, 30, 0.4);
        let pose = PoseParams::new(0.4, 0.1, -0.1, 0.05);
        let (_, jac) = warp_with_grad(&img, &pose, 1.2, 8, 6);
        assert!(jac.rows.iter().flatten().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn ramp_translation_jacobian_is_constant_positive() {
        let img = Image::from_fn(40, 50, |_, c| c as f32 * 0.1);
        let pose = PoseParams::new(0.3, 0.05, 0.0, 0.0);
        let (_, jac) = warp_with_grad(&img, &pose, 1.0, 7, 7);
        let col = jac.column(1);
        let expect = 0.1 * 0.5 * 49.0;
        for v in col {
            assert!((v - expect).abs() < 1e-4 * expect);
        }
    }

    /// True when a sample's pixel position is at least `margin` away from
    /// every integer row/column, so a small perturbation stays on one
    /// bilinear patch.
    fn off_kink(img: &Image, a: &AffineMatrix, p: NormCoord, margin: f64) -> bool {
        let m = &a.0;
        let x = m[0][0] * p.x + m[0][1] * p.y + m[0][2];
        let y = m[1][0] * p.x + m[1][1] * p.y + m[1][2];
        let (r, c) = img.norm_to_pixel(NormCoord::new(x, y));
        let fr = r - r.floor();
        let fc = c - c.floor();
        fr > margin && fr < 1.0 - margin && fc > margin && fc < 1.0 - margin
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = 1.3;
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for _ in 0..100 {
            let img = random_image(&mut rng, 32, 32);
            let pose = PoseParams::new(
                rng.random_range(0.2..0.6),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.1..0.1),
            );
            let (vals, jac) = warp_pose_with_grad(&img, &pose, f, 9, 7);
            let a = affine_matrix(&pose, f);
            let grid = make_regular_grid(9, 7);
            for k in 0..4 {
                let mut plus = pose;
                let mut minus = pose;
                *plus.component_mut(k) += h;
                *minus.component_mut(k) -= h;
                let vp = warp_values(&img, &affine_matrix(&plus, f), 9, 7);
                let vm = warp_values(&img, &affine_matrix(&minus, f), 9, 7);
                for i in 0..vals.len() {
                    if !off_kink(&img, &a, grid[i], 0.02) {
                        continue;
                    }
                    let fd = (vp[i] - vm[i]) / (2.0 * h);
                    let an = jac.rows[i][k];
                    let rel = (fd - an).abs() / an.abs().max(1e-2);
                    worst = worst.max(rel);
                    checked += 1;
                }
            }
        }
        assert!(checked > 1000);
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn flip_commutes_with_mirrored_warp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 21, 33);
        let a = AffineMatrix([[0.4, 0.0, 0.2], [0.0, 0.3, -0.1]]);
        let mirrored = AffineMatrix([[0.4, 0.0, -0.2], [0.0, 0.3, -0.1]]);
        let lhs = warp(&horizontal_flip(&img), &mirrored, 10, 12);
        let rhs = horizontal_flip(&warp(&img, &a, 10, 12));
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest::proptest! {
        #[test]
        fn samples_stay_within_zero_padded_range(
            seed in 0u64..1000,
            x in -1.5f64..1.5,
            y in -1.5f64..1.5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, 7, 9);
            let v = bilinear_sample(&img, NormCoord::new(x, y));
            proptest::prop_assert!((v - naive_sample(&img, x, y)).abs() < 1e-9);
            let hi = img.data().iter().fold(0.0f32, |m, &p| m.max(p)) as f64;
            proptest::prop_assert!((-1e-12..=hi + 1e-12).contains(&v));
        }
    }
}
