//! Constrained pose family and its unconstrained parametrization.
//!
//! A pose `θ = (scale, tx, ty, rot)` places a rectangle of half-width `scale`
//! and half-height `scale / f` (normalized units) centered at `(tx, ty)` and
//! rotated by `rot` radians. [`constrain`] maps any `v ∈ ℝ⁴` onto the box of
//! poses whose rotation-free rectangle lies inside `[-1, 1]²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bounds of the pose family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamConfig {
    /// Smallest scale.
    pub alpha0: f64,
    /// Width of the scale range; the largest scale is `alpha0 + beta0`.
    pub beta0: f64,
    /// Largest absolute rotation in radians.
    pub rot_bound: f64,
    /// Template aspect ratio height / width.
    pub f: f64,
}

impl Default for ParamConfig {
    fn default() -> Self {
        ParamConfig {
            alpha0: 0.15,
            beta0: 0.8,
            rot_bound: 0.13,
            f: 1.0,
        }
    }
}

impl ParamConfig {
    pub fn with_aspect(f: f64) -> Self {
        ParamConfig {
            f,
            ..ParamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha0 > 0.0
            && self.beta0 > 0.0
            && self.alpha0 + self.beta0 <= 1.0
            && self.f >= 1.0
            && self.rot_bound >= 0.0
            && [self.alpha0, self.beta0, self.f, self.rot_bound]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("parametrization bounds {self:?}")))
        }
    }

    pub fn max_scale(&self) -> f64 {
        self.alpha0 + self.beta0
    }
}

/// Unconstrained preimage of a pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnconstrainedParams(pub [f64; 4]);

/// Interpretable pose `(scale, tx, ty, rot)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    pub rot: f64,
}

impl PoseParams {
    pub fn new(scale: f64, tx: f64, ty: f64, rot: f64) -> Self {
        PoseParams { scale, tx, ty, rot }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.scale, self.tx, self.ty, self.rot]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        PoseParams::new(a[0], a[1], a[2], a[3])
    }

    pub fn component(&self, k: usize) -> f64 {
        self.to_array()[k]
    }

    pub fn component_mut(&mut self, k: usize) -> &mut f64 {
        match k {
            0 => &mut self.scale,
            1 => &mut self.tx,
            2 => &mut self.ty,
            3 => &mut self.rot,
            _ => panic!("pose component index {k} out of range"),
        }
    }

    /// Vertical half-extent `scale / f`.
    pub fn vertical_scale(&self, f: f64) -> f64 {
        self.scale / f
    }

    /// Whether the pose satisfies every box constraint, with slack `tol`.
    pub fn is_valid(&self, cfg: &ParamConfig, tol: f64) -> bool {
        let s1 = self.scale;
        let s2 = s1 / cfg.f;
        s1 >= cfg.alpha0 - tol
            && s1 <= cfg.max_scale() + tol
            && self.tx.abs() <= 1.0 - s1 + tol
            && self.ty.abs() <= 1.0 - s2 + tol
            && self.rot.abs() <= cfg.rot_bound + tol
    }

    /// Projects the pose back into the constraint box.
    pub fn clamped(&self, cfg: &ParamConfig) -> PoseParams {
        let scale = self.scale.clamp(cfg.alpha0, cfg.max_scale());
        let hx = 1.0 - scale;
        let hy = 1.0 - scale / cfg.f;
        PoseParams {
            scale,
            tx: self.tx.clamp(-hx, hx),
            ty: self.ty.clamp(-hy, hy),
            rot: self.rot.clamp(-cfg.rot_bound, cfg.rot_bound),
        }
    }

    /// Like [`PoseParams::clamped`] but strictly inside the box by a relative
    /// margin `eps`, so the result can be passed to [`unconstrain`].
    pub fn interior(&self, cfg: &ParamConfig, eps: f64) -> PoseParams {
        let lo = cfg.alpha0 + eps * cfg.beta0;
        let hi = cfg.max_scale() - eps * cfg.beta0;
        let scale = self.scale.clamp(lo, hi);
        let hx = (1.0 - scale) * (1.0 - eps);
        let hy = (1.0 - scale / cfg.f) * (1.0 - eps);
        let hr = cfg.rot_bound * (1.0 - eps);
        PoseParams {
            scale,
            tx: self.tx.clamp(-hx, hx),
            ty: self.ty.clamp(-hy, hy),
            rot: self.rot.clamp(-hr, hr),
        }
    }

    /// The four corners `A(θ)·[±1, ±1, 1]ᵀ` in the order top-left,
    /// top-right, bottom-right, bottom-left.
    pub fn corners(&self, f: f64) -> [(f64, f64); 4] {
        let a = affine_matrix(self, f);
        [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].map(|(x, y)| a.apply(x, y))
    }
}

/// 2×3 matrix acting on homogeneous coordinates `[x, y, 1]ᵀ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMatrix(pub [[f64; 3]; 2]);

impl AffineMatrix {
    pub fn identity() -> Self {
        AffineMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    /// `self ∘ inner`: first `inner`, then `self`.
    pub fn compose(&self, inner: &AffineMatrix) -> AffineMatrix {
        let a = &self.0;
        let b = &inner.0;
        let mut out = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            out[r][2] += a[r][2];
        }
        AffineMatrix(out)
    }

    pub fn inverse(&self) -> Option<AffineMatrix> {
        let m = &self.0;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-300 || !det.is_finite() {
            return None;
        }
        let i00 = m[1][1] / det;
        let i01 = -m[0][1] / det;
        let i10 = -m[1][0] / det;
        let i11 = m[0][0] / det;
        Some(AffineMatrix([
            [i00, i01, -(i00 * m[0][2] + i01 * m[1][2])],
            [i10, i11, -(i10 * m[0][2] + i11 * m[1][2])],
        ]))
    }
}

/// Maps an unconstrained vector onto the pose box.
pub fn constrain(v: &UnconstrainedParams, cfg: &ParamConfig) -> PoseParams {
    let [v1, v2, v3, v4] = v.0;
    let scale = cfg.alpha0 + cfg.beta0 * 0.5 * (1.0 + v1.tanh());
    let s2 = scale / cfg.f;
    // (1 - s)(-1 + 2a) with a = (1 + tanh v)/2 reduces to (1 - s) tanh v.
    PoseParams {
        scale,
        tx: (1.0 - scale) * v2.tanh(),
        ty: (1.0 - s2) * v3.tanh(),
        rot: cfg.rot_bound * v4.tanh(),
    }
}

fn checked_atanh(arg: f64, what: &str) -> Result<f64> {
    if arg.is_finite() && arg.abs() < 1.0 {
        Ok(arg.atanh())
    } else {
        Err(Error::BoundaryPose(format!("{what}: atanh argument {arg}")))
    }
}

/// Inverse of [`constrain`] on the interior of the pose box.
pub fn unconstrain(pose: &PoseParams, cfg: &ParamConfig) -> Result<UnconstrainedParams> {
    let v1 = checked_atanh(2.0 * (pose.scale - cfg.alpha0) / cfg.beta0 - 1.0, "scale")?;
    let hx = 1.0 - pose.scale;
    let hy = 1.0 - pose.scale / cfg.f;
    let v2 = checked_atanh(pose.tx / hx, "horizontal center")?;
    let v3 = checked_atanh(pose.ty / hy, "vertical center")?;
    let v4 = if cfg.rot_bound == 0.0 {
        if pose.rot != 0.0 {
            return Err(Error::BoundaryPose(format!(
                "rotation {} with zero rotation bound",
                pose.rot
            )));
        }
        0.0
    } else {
        checked_atanh(pose.rot / cfg.rot_bound, "rotation")?
    };
    Ok(UnconstrainedParams([v1, v2, v3, v4]))
}

/// The affine matrix `A(θ)` mapping template-grid coordinates to image
/// coordinates.
pub fn affine_matrix(pose: &PoseParams, f: f64) -> AffineMatrix {
    let (sin, cos) = pose.rot.sin_cos();
    let s = pose.scale;
    AffineMatrix([
        [s * cos, -s * sin, pose.tx],
        [(s / f) * sin, (s / f) * cos, pose.ty],
    ])
}

/// `∂θ_i / ∂v_j` of [`constrain`], row `i`, column `j`.
pub fn constrain_jacobian(v: &UnconstrainedParams, cfg: &ParamConfig) -> [[f64; 4]; 4] {
    let [v1, v2, v3, v4] = v.0;
    let (t1, t2, t3, t4) = (v1.tanh(), v2.tanh(), v3.tanh(), v4.tanh());
    let scale = cfg.alpha0 + cfg.beta0 * 0.5 * (1.0 + t1);
    let ds = cfg.beta0 * 0.5 * (1.0 - t1 * t1);
    let mut j = [[0.0; 4]; 4];
    j[0][0] = ds;
    j[1][0] = -t2 * ds;
    j[1][1] = (1.0 - scale) * (1.0 - t2 * t2);
    j[2][0] = -t3 * ds / cfg.f;
    j[2][2] = (1.0 - scale / cfg.f) * (1.0 - t3 * t3);
    j[3][3] = cfg.rot_bound * (1.0 - t4 * t4);
    j
}

/// Pulls a pose-space gradient back to the unconstrained space: `Jᵀ·g`.
pub fn pullback(v: &UnconstrainedParams, cfg: &ParamConfig, grad_pose: &[f64; 4]) -> [f64; 4] {
    let j = constrain_jacobian(v, cfg);
    let mut out = [0.0; 4];
    for (col, o) in out.iter_mut().enumerate() {
        *o = (0..4).map(|row| j[row][col] * grad_pose[row]).sum();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(f: f64) -> ParamConfig {
        ParamConfig::with_aspect(f)
    }

    #[test]
    fn constrain_examples() {
        let c = cfg(1.0);
        let p = constrain(&UnconstrainedParams([0.0; 4]), &c);
        assert_eq!(p, PoseParams::new(0.55, 0.0, 0.0, 0.0));

        let low = constrain(&UnconstrainedParams([-40.0, 0.0, 0.0, 0.0]), &c);
        assert!((low.scale - 0.15).abs() < 1e-12);

        let p = constrain(&UnconstrainedParams([0.0, 0.5f64.atanh(), 0.0, 0.0]), &c);
        // Scalar evaluation of (1 - 0.55)(-1 + 2·0.75).
        let a13 = 0.5 * (1.0 + 0.5);
        let expect = (1.0 - 0.55) * (-1.0 + 2.0 * a13);
        assert!((p.tx - expect).abs() < 1e-12);
        assert!((p.tx - 0.225).abs() < 1e-12);
    }

    #[test]
    fn unconstrain_examples() {
        let c = cfg(1.0);
        let v = unconstrain(&PoseParams::new(0.55, 0.0, 0.0, 0.0), &c).unwrap();
        assert!(v.0.iter().all(|x| x.abs() < 1e-12));
        let err = unconstrain(&PoseParams::new(0.15, 0.0, 0.0, 0.0), &c);
        assert!(matches!(err, Err(Error::BoundaryPose(_))));
        let err = unconstrain(&PoseParams::new(0.5, 0.5, 0.0, 0.0), &c);
        assert!(matches!(err, Err(Error::BoundaryPose(_))));
    }

    #[test]
    fn affine_examples() {
        let a = affine_matrix(&PoseParams::new(0.3, 0.0, 0.0, 0.0), 1.5);
        assert_eq!(a.0, [[0.3, 0.0, 0.0], [0.0, 0.3 / 1.5, 0.0]]);
        let a = affine_matrix(&PoseParams::new(0.5, 0.1, -0.2, 0.0), 2.0);
        assert_eq!(a.0, [[0.5, 0.0, 0.1], [0.0, 0.25, -0.2]]);

        let a = affine_matrix(&PoseParams::new(0.4, 0.0, 0.0, 0.1), 1.6);
        let (c, s) = (0.1f64.cos(), 0.1f64.sin());
        let expect = [[0.4 * c, -0.4 * s, 0.0], [0.4 / 1.6 * s, 0.4 / 1.6 * c, 0.0]];
        for r in 0..2 {
            for k in 0..3 {
                assert!((a.0[r][k] - expect[r][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_examples() {
        let c = cfg(1.0);
        let j = constrain_jacobian(&UnconstrainedParams([0.0; 4]), &c);
        assert!((j[0][0] - 0.4).abs() < 1e-15);
        assert!((j[3][3] - 0.13).abs() < 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let c = cfg(1.3);
        let h = 1e-6;
        for _ in 0..200 {
            let v = UnconstrainedParams([(); 4].map(|_| rng.random_range(-2.5..2.5)));
            let j = constrain_jacobian(&v, &c);
            for col in 0..4 {
                let mut vp = v;
                let mut vm = v;
                vp.0[col] += h;
                vm.0[col] -= h;
                let tp = constrain(&vp, &c).to_array();
                let tm = constrain(&vm, &c).to_array();
                for row in 0..4 {
                    let fd = (tp[row] - tm[row]) / (2.0 * h);
                    let err = (fd - j[row][col]).abs() / j[row][col].abs().max(1e-4);
                    assert!(err < 1e-6, "d{row}/d{col}: fd {fd} vs {}", j[row][col]);
                }
            }
        }
    }

    #[test]
    fn compose_and_inverse() {
        let a = affine_matrix(&PoseParams::new(0.4, 0.1, -0.2, 0.05), 1.2);
        let b = affine_matrix(&PoseParams::new(0.7, -0.1, 0.2, -0.03), 1.0);
        let ab = a.compose(&b);
        let (x, y) = b.apply(0.3, -0.4);
        let direct = a.apply(x, y);
        let composed = ab.apply(0.3, -0.4);
        assert!((direct.0 - composed.0).abs() < 1e-14 && (direct.1 - composed.1).abs() < 1e-14);
        let inv = a.inverse().unwrap();
        let (x, y) = inv.apply(a.apply(0.2, 0.9).0, a.apply(0.2, 0.9).1);
        assert!((x - 0.2).abs() < 1e-12 && (y - 0.9).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn constrained_poses_are_valid(v in proptest::array::uniform4(-10.0f64..10.0), f in 1.0f64..2.5) {
            let c = cfg(f);
            let p = constrain(&UnconstrainedParams(v), &c);
            prop_assert!(p.is_valid(&c, 1e-12));
            let rotation_free = PoseParams { rot: 0.0, ..p };
            for (x, y) in rotation_free.corners(f) {
                prop_assert!(x.abs() <= 1.0 + 1e-12 && y.abs() <= 1.0 + 1e-12);
            }
            // Rotation slack is bounded by sin(rot)·(s1 + s2).
            let slack = p.rot.abs().sin() * (p.scale + p.scale / f);
            for (x, y) in p.corners(f) {
                prop_assert!(x.abs() <= 1.0 + slack + 1e-12 && y.abs() <= 1.0 + slack + 1e-12);
            }
        }

        #[test]
        fn unconstrain_inverts_constrain(v in proptest::array::uniform4(-5.0f64..5.0)) {
            let c = cfg(1.2);
            let back = unconstrain(&constrain(&UnconstrainedParams(v), &c), &c).unwrap();
            for k in 0..4 {
                prop_assert!((back.0[k] - v[k]).abs() < 1e-6);
            }
        }

        #[test]
        fn monotone_in_scale_and_translation(a in -4.0f64..4.0, d in 1e-3f64..1.0, v2 in -3.0f64..3.0) {
            let c = cfg(1.0);
            let lo = constrain(&UnconstrainedParams([a, v2, 0.0, 0.0]), &c);
            let hi = constrain(&UnconstrainedParams([a + d, v2, 0.0, 0.0]), &c);
            prop_assert!(hi.scale > lo.scale);
            let right = constrain(&UnconstrainedParams([a, v2 + d, 0.0, 0.0]), &c);
            prop_assert!(right.tx > lo.tx);
        }
    }
}
