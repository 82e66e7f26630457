use jointmatch::loss::{pair_loss, pair_loss_grad};
use jointmatch::optimize::{grid_search, sharpen, AdamConfig, GridConfig};
use jointmatch::param::unconstrain;
use jointmatch::preprocess::{split_bilateral, PreprocessConfig};
use jointmatch::synth::{bilateral_composite, generate_suite, score, SuiteConfig};
use jointmatch::{Image, PoseParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn argmax(img: &Image) -> (usize, usize) {
    let (mut best, mut at) = (f32::MIN, (0, 0));
    for r in 0..img.height() {
        for c in 0..img.width() {
            if img.get(r, c) > best {
                best = img.get(r, c);
                at = (r, c);
            }
        }
    }
    at
}

#[test]
fn pair_gradient_matches_central_differences() {
    let cfg = SuiteConfig::default();
    let t = cfg.template().unwrap();
    let pcfg = cfg.param_config();
    let pairs = generate_suite(&cfg, 4, &mut ChaCha8Rng::seed_from_u64(11));
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut checked, mut attempts) = (0, 0);
    while checked < 40 {
        attempts += 1;
        assert!(attempts < 400, "too few smooth probes");
        let p = &pairs[checked % pairs.len()];
        let v: [f64; 8] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let (_, g) = pair_loss_grad(&p.left, &p.right, &v, &t, &pcfg);
        let fd = |k: usize, h: f64| {
            let (mut a, mut b) = (v, v);
            a[k] += h;
            b[k] -= h;
            (pair_loss(&p.left, &p.right, &a, &t, &pcfg).total
                - pair_loss(&p.left, &p.right, &b, &t, &pcfg).total)
                / (2.0 * h)
        };
        let probe: Vec<(f64, f64)> = (0..8).map(|k| (fd(k, 1e-6), fd(k, 5e-7))).collect();
        // Skip points where a branch switch or pixel crossing sits inside the stencil.
        if probe.iter().any(|(a, b)| (a - b).abs() > 1e-4 * a.abs().max(1e-3)) {
            continue;
        }
        for (k, (a, _)) in probe.iter().enumerate() {
            let rel = (g[k] - a).abs() / a.abs().max(1e-3);
            assert!(rel < 1e-3, "component {k}: analytic {} numeric {a}", g[k]);
        }
        checked += 1;
    }
}

#[test]
fn grid_search_recovers_planted_poses() {
    let cfg = SuiteConfig::default();
    let t = cfg.template().unwrap();
    let pcfg = cfg.param_config();
    let gcfg = GridConfig {
        scales: 4,
        iters_per_init: 40,
        ..GridConfig::default()
    };
    for p in generate_suite(&cfg, 2, &mut ChaCha8Rng::seed_from_u64(21)) {
        let (det, stats) = grid_search(&p.left, &p.right, &t, &pcfg, &gcfg, &AdamConfig::default()).unwrap();
        let m = score(&det, &p.truth, pcfg.f);
        assert_eq!(stats.failed_inits, 0);
        for side in [m.left, m.right] {
            assert!(side.scale_error < 0.02, "{m:?}");
            assert!(side.center_error < 0.02, "{m:?}");
        }
        assert!(det.sides_loss() < 0.1, "{}", det.sides_loss());
    }
}

#[test]
fn sharpening_never_worsens_a_perturbed_start() {
    let cfg = SuiteConfig::default();
    let t = cfg.template().unwrap();
    let pcfg = cfg.param_config();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for p in generate_suite(&cfg, 3, &mut rng) {
        let nudge = |pose: &PoseParams, rng: &mut ChaCha8Rng| {
            let moved = PoseParams::new(
                pose.scale * rng.random_range(0.9..1.1),
                pose.tx + rng.random_range(-0.05..0.05),
                pose.ty + rng.random_range(-0.05..0.05),
                pose.rot * 0.5,
            );
            unconstrain(&moved.interior(&pcfg, 1e-6), &pcfg).unwrap().0
        };
        let (vl, vr) = (nudge(&p.truth.left, &mut rng), nudge(&p.truth.right, &mut rng));
        let v0 = [vl[0], vl[1], vl[2], vl[3], vr[0], vr[1], vr[2], vr[3]];
        let start = pair_loss(&p.left, &p.right, &v0, &t, &pcfg).total;
        let refined = sharpen(&p.left, &p.right, &t, &pcfg, &v0, &AdamConfig::default()).unwrap();
        assert!(refined.loss.total <= start);
        assert!(refined.loss.total < 0.5 * start, "{start} -> {}", refined.loss.total);
    }
}

#[test]
fn split_halves_map_markers_back_to_the_input() {
    let cfg = SuiteConfig::default();
    let pre = PreprocessConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..5 {
        let comp = bilateral_composite(&cfg, 200, 150, &mut rng);
        let split = split_bilateral(&comp.image, &pre).unwrap();
        for (half, tr, marker) in [
            (&split.u_left, &split.left_transform, comp.markers[0]),
            (&split.u_right, &split.right_transform, comp.markers[1]),
        ] {
            let (r, c) = argmax(half);
            let (orow, ocol) = tr.to_original(r as f64, c as f64);
            let err = ((orow - marker.0 as f64).powi(2) + (ocol - marker.1 as f64).powi(2)).sqrt();
            assert!(err < 2.0, "marker {marker:?} mapped back to ({orow}, {ocol})");
        }
    }
}
