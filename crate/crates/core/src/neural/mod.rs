//! The learned localization method.
//!
//! A Siamese network (one weight set for both halves) predicts an
//! unconstrained pose per half. Two networks are chained: the first locates a
//! coarse template with extra context, its pose is enlarged and used to crop
//! each half, and the second locates the fine template inside the crop. The
//! two poses compose exactly into one pose per half, which can optionally be
//! refined by Adam on the matching energy.

pub mod net;
pub mod train;

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{Detection, DetectionStats, Method};
use crate::error::{Error, Result};
use crate::image::{warp_pose, Image};
use crate::io::{read_json, write_json};
use crate::loss::{breakdown_from_sides, side_loss, Template};
use crate::optimize::{sharpen, AdamConfig};
use crate::param::{constrain, unconstrain, ParamConfig, PoseParams, UnconstrainedParams};

pub use net::{prepare_input, ConvSpec, ForwardCache, LocNet, LocNetArch, OUTPUT_BOUND};
pub use train::{minibatch_grad, predict_pair, refresh_weights, train_phase, EpochRecord, TrainConfig, TrainReport};

/// Layouts of the two networks and the crop enlargement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuralConfig {
    pub coarse: LocNetArch,
    /// Its input size is also the crop grid of the second stage.
    pub fine: LocNetArch,
    pub enlarge: f64,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        NeuralConfig {
            coarse: LocNetArch::default(),
            fine: LocNetArch::with_input(48, 40),
            enlarge: 1.2,
        }
    }
}

impl NeuralConfig {
    pub fn validate(&self) -> Result<()> {
        self.coarse.validate()?;
        self.fine.validate()?;
        if !(self.enlarge >= 1.0 && self.enlarge.is_finite()) {
            return Err(Error::InvalidConfig(format!("enlarge factor {}", self.enlarge)));
        }
        Ok(())
    }
}

/// Both trained networks.
#[derive(Clone, Debug)]
pub struct NeuralModel {
    pub coarse: LocNet,
    pub fine: LocNet,
    pub enlarge: f64,
    pub seed: u64,
}

/// Scales a pose about its center by `factor`, capped at the full frame,
/// and moves the center so the enlarged rectangle stays inside.
pub fn enlarge_pose(pose: &PoseParams, factor: f64, f: f64) -> PoseParams {
    let scale = (pose.scale * factor).min(1.0).min(f);
    let hx = 1.0 - scale;
    let hy = 1.0 - scale / f;
    PoseParams {
        scale,
        tx: pose.tx.clamp(-hx, hx),
        ty: pose.ty.clamp(-hy, hy),
        rot: pose.rot,
    }
}

/// Parameter box of the second stage. Its poses live in the crop frame,
/// which already carries the template aspect, so they use `f = 1`.
pub fn inner_param_config(base: &ParamConfig) -> ParamConfig {
    ParamConfig { f: 1.0, ..*base }
}

/// The pose equal to the crop by `outer` (aspect `f`) followed by `inner`
/// (aspect 1) inside it.
///
/// With `A(θ) = t + D·s·R` and `D = diag(1, 1/f)`, the composition is
/// `A_outer(t_in) + D·(s_out s_in)·R(rot_out + rot_in)`, again a pose.
pub fn compose_pose(outer: &PoseParams, inner: &PoseParams, f: f64) -> PoseParams {
    let (tx, ty) = crate::param::affine_matrix(outer, f).apply(inner.tx, inner.ty);
    PoseParams {
        scale: outer.scale * inner.scale,
        tx,
        ty,
        rot: outer.rot + inner.rot,
    }
}

/// The second-stage input: `half` sampled on the enlarged first-stage
/// rectangle at the crop grid.
pub fn crop_half(half: &Image, enlarged: &PoseParams, f: f64, arch: &LocNetArch) -> Image {
    warp_pose(half, enlarged, f, arch.input_height, arch.input_width)
}

fn split8(v: &[f64; 8]) -> (UnconstrainedParams, UnconstrainedParams) {
    (
        UnconstrainedParams([v[0], v[1], v[2], v[3]]),
        UnconstrainedParams([v[4], v[5], v[6], v[7]]),
    )
}

fn enlarged_poses(
    net: &LocNet,
    left: &Image,
    right: &Image,
    pcfg: &ParamConfig,
    factor: f64,
) -> Result<(PoseParams, PoseParams)> {
    let v = predict_pair(net, left, right)?;
    let (vl, vr) = split8(&v);
    Ok((
        enlarge_pose(&constrain(&vl, pcfg), factor, pcfg.f),
        enlarge_pose(&constrain(&vr, pcfg), factor, pcfg.f),
    ))
}

/// Training reports of both stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TwoPhaseReport {
    pub coarse: TrainReport,
    pub fine: TrainReport,
}

/// Trains the first network on raw halves against `t_coarse`, then a fresh
/// second network on enlarged crops against `t_fine`.
pub fn two_phase_train(
    data: &[(Image, Image)],
    t_coarse: &Template,
    t_fine: &Template,
    base: &ParamConfig,
    ncfg: &NeuralConfig,
    tcfg: &TrainConfig,
) -> Result<(NeuralModel, TwoPhaseReport)> {
    ncfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let pc = t_coarse.param_config(base);
    let mut coarse = LocNet::init(ncfg.coarse.clone(), &mut rng)?;
    let coarse_report = train_phase(&mut coarse, data, t_coarse, &pc, tcfg)?;

    let crops = data
        .iter()
        .map(|(l, r)| {
            let (el, er) = enlarged_poses(&coarse, l, r, &pc, ncfg.enlarge)?;
            Ok((crop_half(l, &el, pc.f, &ncfg.fine), crop_half(r, &er, pc.f, &ncfg.fine)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut fine = LocNet::init(ncfg.fine.clone(), &mut rng)?;
    let inner = inner_param_config(base);
    let fine_cfg = TrainConfig {
        seed: tcfg.seed.wrapping_add(1),
        ..*tcfg
    };
    let fine_report = train_phase(&mut fine, &crops, t_fine, &inner, &fine_cfg)?;
    Ok((
        NeuralModel {
            coarse,
            fine,
            enlarge: ncfg.enlarge,
            seed: tcfg.seed,
        },
        TwoPhaseReport {
            coarse: coarse_report,
            fine: fine_report,
        },
    ))
}

/// Per-half poses at each stage of inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePoses {
    pub coarse: PoseParams,
    pub enlarged: PoseParams,
    /// Pose inside the crop frame.
    pub inner: PoseParams,
    pub composed: PoseParams,
}

/// Runs both stages on both halves.
pub fn stage_poses(
    model: &NeuralModel,
    u_left: &Image,
    u_right: &Image,
    t_coarse: &Template,
    base: &ParamConfig,
) -> Result<[StagePoses; 2]> {
    let pc = t_coarse.param_config(base);
    let inner_cfg = inner_param_config(base);
    let run = |half: &Image| -> Result<StagePoses> {
        let coarse = constrain(&UnconstrainedParams(model.coarse.predict(half)?), &pc);
        let enlarged = enlarge_pose(&coarse, model.enlarge, pc.f);
        let crop = crop_half(half, &enlarged, pc.f, model.fine.arch());
        let inner = constrain(&UnconstrainedParams(model.fine.predict(&crop)?), &inner_cfg);
        Ok(StagePoses {
            coarse,
            enlarged,
            inner,
            composed: compose_pose(&enlarged, &inner, pc.f),
        })
    };
    Ok([run(u_left)?, run(u_right)?])
}

/// Neural detection of `t_fine` in both halves; with `sharpen_cfg` the
/// composed poses seed an Adam refinement whose trace minimum is kept.
pub fn infer(
    model: &NeuralModel,
    u_left: &Image,
    u_right: &Image,
    t_coarse: &Template,
    t_fine: &Template,
    base: &ParamConfig,
    sharpen_cfg: Option<&AdamConfig>,
) -> Result<Detection> {
    let started = Instant::now();
    let [sl, sr] = stage_poses(model, u_left, u_right, t_coarse, base)?;
    let f = t_fine.param_config(base).f;
    let (pl, pr) = (sl.composed, sr.composed);
    let ll = side_loss(u_left, &pl, t_fine, f);
    let lr = side_loss(u_right, &pr, t_fine, f);
    let mut breakdown = breakdown_from_sides(&ll, &lr, &pl, &pr);
    let mut poses = (pl, pr);
    let mut evals = 0;
    let method = match sharpen_cfg {
        None => Method::Neural,
        Some(acfg) => {
            let pcfg = t_fine.param_config(base);
            let vl = unconstrain(&pl.interior(&pcfg, 1e-6), &pcfg)?;
            let vr = unconstrain(&pr.interior(&pcfg, 1e-6), &pcfg)?;
            let v0 = [vl.0[0], vl.0[1], vl.0[2], vl.0[3], vr.0[0], vr.0[1], vr.0[2], vr.0[3]];
            let refined = sharpen(u_left, u_right, t_fine, &pcfg, &v0, acfg)?;
            evals = refined.evals;
            if refined.loss.total <= breakdown.total {
                breakdown = refined.loss;
                poses = refined.poses(&pcfg);
            }
            Method::NeuralSharpen
        }
    };
    Ok(Detection::new(
        method,
        poses.0,
        poses.1,
        &breakdown,
        DetectionStats {
            inits: 1,
            evals,
            wall_ms: started.elapsed().as_millis() as u64,
        },
    ))
}

/// Format tag of saved models.
pub const MODEL_FORMAT: &str = "jointmatch-locnet";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NetFile {
    arch: LocNetArch,
    params: Vec<f64>,
}

impl NetFile {
    fn of(net: &LocNet) -> Self {
        NetFile {
            arch: net.arch().clone(),
            params: net.params().to_vec(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    seed: u64,
    enlarge: f64,
    coarse: NetFile,
    fine: NetFile,
}

/// Writes both networks with their layouts to a JSON file.
pub fn save_model(model: &NeuralModel, path: impl AsRef<Path>) -> Result<()> {
    let file = ModelFile {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        seed: model.seed,
        enlarge: model.enlarge,
        coarse: NetFile::of(&model.coarse),
        fine: NetFile::of(&model.fine),
    };
    write_json(&file, path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NeuralModel> {
    let path = path.as_ref();
    let file: ModelFile = read_json(path)?;
    if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
        return Err(Error::decode(
            path,
            format!("unsupported model format {} v{}", file.format, file.version),
        ));
    }
    Ok(NeuralModel {
        coarse: LocNet::from_params(file.coarse.arch, file.coarse.params)?,
        fine: LocNet::from_params(file.fine.arch, file.fine.params)?,
        enlarge: file.enlarge,
        seed: file.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::affine_matrix;

    #[test]
    fn enlargement_is_clamped_to_frame() {
        let p = PoseParams::new(0.9, 0.05, -0.05, 0.0);
        let e = enlarge_pose(&p, 1.2, 1.0);
        assert_eq!(e.scale, 1.0);
        assert_eq!((e.tx, e.ty), (0.0, 0.0));
        let q = enlarge_pose(&PoseParams::new(0.3, 0.65, 0.0, 0.05), 1.2, 1.2);
        assert!((q.scale - 0.36).abs() < 1e-12);
        assert!((q.tx - 0.64).abs() < 1e-12);
    }

    #[test]
    fn composing_with_full_frame_is_identity() {
        let outer = PoseParams::new(0.4, 0.1, -0.2, 0.07);
        let id = PoseParams::new(1.0, 0.0, 0.0, 0.0);
        let c = compose_pose(&outer, &id, 1.2);
        assert!((c.scale - outer.scale).abs() < 1e-15);
        assert!((c.tx - outer.tx).abs() < 1e-15 && (c.ty - outer.ty).abs() < 1e-15);
        assert_eq!(c.rot, outer.rot);
    }

    #[test]
    fn composed_pose_equals_sequential_maps() {
        let f = 1.2;
        let outer = PoseParams::new(0.5, 0.2, -0.1, 0.09);
        let inner = PoseParams::new(0.6, -0.3, 0.25, -0.04);
        let composed = affine_matrix(&compose_pose(&outer, &inner, f), f);
        let a_out = affine_matrix(&outer, f);
        let a_in = affine_matrix(&inner, 1.0);
        for &(x, y) in &[(-1.0, -1.0), (1.0, -1.0), (0.3, 0.7), (-0.8, 0.1), (1.0, 1.0)] {
            let (ix, iy) = a_in.apply(x, y);
            let (sx, sy) = a_out.apply(ix, iy);
            let (cx, cy) = composed.apply(x, y);
            assert!((sx - cx).abs() < 1e-12 && (sy - cy).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_has_grid_shape_for_any_pose() {
        let half = Image::from_fn(60, 40, |r, c| (r + c) as f32);
        let arch = LocNetArch::with_input(24, 20);
        for p in [PoseParams::new(0.2, 0.5, -0.3, 0.1), PoseParams::new(1.0, 0.0, 0.0, 0.0)] {
            assert_eq!(crop_half(&half, &p, 1.2, &arch).shape(), (24, 20));
        }
    }

    #[test]
    fn same_half_gives_same_poses() {
        let arch = NeuralConfig {
            coarse: LocNetArch::with_input(40, 25),
            fine: LocNetArch::with_input(24, 20),
            enlarge: 1.2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = NeuralModel {
            coarse: LocNet::init(arch.coarse.clone(), &mut rng).unwrap(),
            fine: LocNet::init(arch.fine.clone(), &mut rng).unwrap(),
            enlarge: 1.2,
            seed: 9,
        };
        let half = Image::from_fn(80, 50, |r, c| ((r * 13 + c * 7) % 23) as f32);
        let t = Template::with_default_windows(Image::from_fn(24, 20, |r, c| ((r * 3 + c) % 5) as f32)).unwrap();
        let det = infer(&model, &half, &half, &t, &t, &ParamConfig::default(), None).unwrap();
        assert_eq!(det.left.pose, det.right.pose);
        assert_eq!(det.l_reg, 0.0);
        assert!(det.left.pose.scale > 0.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.coarse.params(), model.coarse.params());
        assert_eq!(back.fine.arch(), model.fine.arch());
    }
}
