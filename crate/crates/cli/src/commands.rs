use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use jointmatch::baseline::multiscale_match;
use jointmatch::detection::{DetectionReport, PixelQuad};
use jointmatch::image::horizontal_flip;
use jointmatch::io::{load_image, load_template, read_json, save_png, save_template, template_hash, write_json};
use jointmatch::neural::{infer, load_model, save_model, two_phase_train, NeuralModel};
use jointmatch::optimize::grid_search;
use jointmatch::preprocess::{split_bilateral, HalfTransform};
use jointmatch::synth::{generate_suite, score, GroundTruth, Metrics};
use jointmatch::{Config, Detection, Error, Image, Method, Template};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::args::{Cli, Command, DetectArgs, EvalArgs, InputArgs, PreprocessArgs, SynthArgs, TrainArgs};
use crate::overlay::{draw_quads, LEFT_COLOR, RIGHT_COLOR};
use crate::{CliError, CliResult};

pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    if cli.threads > 0 {
        // A second in-process call keeps the pool built by the first.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match &cli.command {
        Command::Synth(a) => synth(a, &cfg, cli.seed.unwrap_or(0)),
        Command::Preprocess(a) => preprocess(a, &cfg),
        Command::Detect(a) => detect(a, &cfg),
        Command::Train(a) => train(a, &cfg),
        Command::Eval(a) => eval(a, &cfg),
        Command::Config => {
            let text = toml::to_string(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
            print!("{text}");
            Ok(())
        }
    }
}

/// Defaults, overridden by the config file, then by command-line flags.
pub fn load_config(cli: &Cli) -> CliResult<Config> {
    let mut cfg = match &cli.config {
        None => Config::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
            if is_json {
                Config::from_json(&text)?
            } else {
                toml::from_str(&text)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
            }
        }
    };
    cfg.grid.threads = cli.threads;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

/// Truth sidecar written by `synth`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruthFile {
    pub seed: u64,
    pub f: f64,
    pub pairs: Vec<TruthEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruthEntry {
    pub name: String,
    pub truth: GroundTruth,
}

fn synth(args: &SynthArgs, cfg: &Config, seed: u64) -> CliResult<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = generate_suite(&cfg.synth, args.count, &mut rng);
    create_dir(&args.out)?;
    save_template(&cfg.synth.template()?, args.out.join("template"))?;
    save_template(&cfg.synth.coarse_template()?, args.out.join("template_coarse"))?;
    if args.bilateral {
        create_dir(&args.out.join("bilateral"))?;
    }
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("{i:04}");
        save_png(&p.left, args.out.join(format!("{name}_left.png")))?;
        save_png(&p.right, args.out.join(format!("{name}_right.png")))?;
        if args.bilateral {
            let flipped = horizontal_flip(&p.left);
            let w = flipped.width();
            let joined = Image::from_fn(flipped.height(), 2 * w, |r, c| {
                if c < w {
                    flipped.get(r, c)
                } else {
                    p.right.get(r, c - w)
                }
            });
            save_png(&joined, args.out.join("bilateral").join(format!("{name}.png")))?;
        }
        entries.push(TruthEntry { name, truth: p.truth });
    }
    let truth = TruthFile {
        seed,
        f: cfg.synth.f(),
        pairs: entries,
    };
    write_json(&truth, args.out.join("truth.json"))?;
    println!("wrote {} pairs to {}", pairs.len(), args.out.display());
    Ok(())
}

fn preprocess(args: &PreprocessArgs, cfg: &Config) -> CliResult<()> {
    let u = load_image(&args.input)?;
    let split = split_bilateral(&u, &cfg.preprocess)?;
    create_dir(&args.out)?;
    save_png(&split.u_left, args.out.join("left.png"))?;
    save_png(&split.u_right, args.out.join("right.png"))?;
    write_json(&split.record(u.height(), u.width()), args.out.join("transforms.json"))?;
    println!("split column {}", split.split_column);
    Ok(())
}

/// The two halves and how each maps back to the image it came from.
struct Inputs {
    u_left: Image,
    u_right: Image,
    transforms: [HalfTransform; 2],
    /// Source images with stems, one for a bilateral input, two for halves.
    frames: Vec<(Image, String)>,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into())
}

fn load_inputs(args: &InputArgs, cfg: &Config) -> CliResult<Inputs> {
    match (&args.input, &args.left, &args.right) {
        (Some(path), _, _) => {
            let u = load_image(path)?;
            let split = split_bilateral(&u, &cfg.preprocess)?;
            Ok(Inputs {
                transforms: [split.left_transform, split.right_transform],
                u_left: split.u_left,
                u_right: split.u_right,
                frames: vec![(u, stem(path))],
            })
        }
        (None, Some(l), Some(r)) => {
            let u_left = load_image(l)?;
            let u_right = load_image(r)?;
            Ok(Inputs {
                transforms: [
                    HalfTransform::identity(u_left.height(), u_left.width()),
                    HalfTransform::identity(u_right.height(), u_right.width()),
                ],
                frames: vec![(u_left.clone(), stem(l)), (u_right.clone(), stem(r))],
                u_left,
                u_right,
            })
        }
        _ => Err(CliError::Usage("give --input or both --left and --right".into())),
    }
}

/// Network and coarse template for the neural methods.
struct NeuralParts {
    model: NeuralModel,
    coarse: Template,
}

fn neural_parts(model: Option<&PathBuf>, coarse: Option<&PathBuf>) -> CliResult<Option<NeuralParts>> {
    match (model, coarse) {
        (Some(m), Some(c)) => Ok(Some(NeuralParts {
            model: load_model(m)?,
            coarse: load_template(c)?,
        })),
        _ => Ok(None),
    }
}

fn run_method(
    method: Method,
    u_left: &Image,
    u_right: &Image,
    t: &Template,
    neural: Option<&NeuralParts>,
    cfg: &Config,
) -> CliResult<Detection> {
    let need_neural = || {
        neural.ok_or_else(|| {
            CliError::Usage(format!("method {method} needs --model and --coarse-template"))
        })
    };
    let det = match method {
        Method::Baseline => multiscale_match(u_left, u_right, t, &cfg.baseline)?,
        Method::GridSearch => {
            let pcfg = t.param_config(&cfg.param);
            grid_search(u_left, u_right, t, &pcfg, &cfg.grid, &cfg.adam)?.0
        }
        Method::Neural => {
            let n = need_neural()?;
            infer(&n.model, u_left, u_right, &n.coarse, t, &cfg.param, None)?
        }
        Method::NeuralSharpen => {
            let n = need_neural()?;
            infer(&n.model, u_left, u_right, &n.coarse, t, &cfg.param, Some(&cfg.adam))?
        }
    };
    Ok(det)
}

fn overlay_name(stem: &str, det: &Detection) -> String {
    format!(
        "{stem}_{}_l{:.4}_r{:.4}.png",
        det.method.as_str().replace('+', "-"),
        det.left.loss,
        det.right.loss
    )
}

fn detect(args: &DetectArgs, cfg: &Config) -> CliResult<()> {
    let t = load_template(&args.template)?;
    let neural = neural_parts(args.model.as_ref(), args.coarse_template.as_ref())?;
    let inputs = load_inputs(&args.input, cfg)?;
    let det = run_method(args.method, &inputs.u_left, &inputs.u_right, &t, neural.as_ref(), cfg)?;
    let f = t.f();
    let boxes: [PixelQuad; 2] = [
        inputs.transforms[0].pose_quad(&det.left.pose, f),
        inputs.transforms[1].pose_quad(&det.right.pose, f),
    ];
    let report = DetectionReport::new(&det, template_hash(&t), boxes);
    match &args.out {
        Some(path) => write_json(&report, path)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        ),
    }
    if let Some(dir) = &args.overlay_dir {
        create_dir(dir)?;
        let rendered: Vec<(Image, String, Vec<(PixelQuad, [u8; 3])>)> = match inputs.frames.as_slice() {
            [(u, s)] => vec![(u.clone(), s.clone(), vec![(boxes[0], LEFT_COLOR), (boxes[1], RIGHT_COLOR)])],
            [(l, sl), (r, sr)] => vec![
                (l.clone(), sl.clone(), vec![(boxes[0], LEFT_COLOR)]),
                (r.clone(), sr.clone(), vec![(boxes[1], RIGHT_COLOR)]),
            ],
            _ => unreachable!("one or two frames"),
        };
        for (img, s, quads) in rendered {
            let path = dir.join(overlay_name(&s, &det));
            draw_quads(&img, &quads)
                .save(&path)
                .map_err(|e| CliError::Core(Error::Decode {
                    path: path.display().to_string(),
                    message: e.to_string(),
                }))?;
        }
    }
    Ok(())
}

/// `(name, left path, right path)` for every `NAME_left.png` with a matching
/// `NAME_right.png`, sorted by name.
pub fn list_pairs(dir: &Path) -> CliResult<Vec<(String, PathBuf, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    let mut pairs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| io_error(dir, e))?.path();
        let file = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(name) = file.strip_suffix("_left.png") {
            let right = dir.join(format!("{name}_right.png"));
            if right.exists() {
                pairs.push((name.to_string(), path.clone(), right));
            }
        }
    }
    if pairs.is_empty() {
        return Err(io_error(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no *_left.png / *_right.png pairs"),
        ));
    }
    pairs.sort();
    Ok(pairs)
}

fn load_pairs(dir: &Path) -> CliResult<Vec<(String, Image, Image)>> {
    list_pairs(dir)?
        .into_iter()
        .map(|(name, l, r)| Ok((name, load_image(&l)?, load_image(&r)?)))
        .collect()
}

fn train(args: &TrainArgs, cfg: &Config) -> CliResult<()> {
    let t = load_template(&args.template)?;
    let tc = load_template(&args.coarse_template)?;
    let data: Vec<(Image, Image)> = load_pairs(&args.data)?
        .into_iter()
        .map(|(_, l, r)| (l, r))
        .collect();
    let mut tcfg = cfg.train;
    tcfg.outer_iterations = args.outer.unwrap_or(tcfg.outer_iterations);
    tcfg.epochs = args.epochs.unwrap_or(tcfg.epochs);
    tcfg.batch_size = args.batch.unwrap_or(tcfg.batch_size);
    tcfg.lr_backbone = args.lr_backbone.unwrap_or(tcfg.lr_backbone);
    tcfg.lr_head = args.lr_head.unwrap_or(tcfg.lr_head);
    tcfg.validate()?;
    let (model, report) = two_phase_train(&data, &tc, &t, &cfg.param, &cfg.neural, &tcfg)?;
    for reason in [&report.coarse.aborted, &report.fine.aborted].into_iter().flatten() {
        log::warn!("training stopped early: {reason}");
    }
    save_model(&model, &args.out)?;
    if let Some(path) = &args.report {
        write_json(&report, path)?;
    }
    for (stage, r) in [("coarse", &report.coarse), ("fine", &report.fine)] {
        if let (Some(a), Some(b)) = (r.initial(), r.last()) {
            println!(
                "{stage}: mean loss {:.4} -> {:.4}, scaled {:.4} -> {:.4}",
                a.mean_loss, b.mean_loss, a.mean_scaled_loss, b.mean_scaled_loss
            );
        }
    }
    Ok(())
}

/// One method's result on one pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairResult {
    pub name: String,
    pub method: Method,
    pub l_left: f64,
    pub l_right: f64,
    pub total: f64,
    pub metrics: Option<Metrics>,
}

/// Mean results of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub pairs: usize,
    pub mean_sides_loss: f64,
    pub mean_scale_error: Option<f64>,
    pub mean_center_error: Option<f64>,
    /// Fraction of pairs whose side loss is below the acceptance threshold.
    pub hit_rate: f64,
}

pub fn summarize(method: Method, results: &[PairResult], threshold: f64) -> MethodSummary {
    let n = results.len().max(1) as f64;
    let mean = |g: &dyn Fn(&Metrics) -> f64| -> Option<f64> {
        results
            .iter()
            .map(|r| r.metrics.as_ref().map(g))
            .sum::<Option<f64>>()
            .map(|s| s / (2.0 * n))
    };
    MethodSummary {
        method,
        pairs: results.len(),
        mean_sides_loss: results.iter().map(|r| r.l_left + r.l_right).sum::<f64>() / n,
        mean_scale_error: mean(&|m| m.left.scale_error + m.right.scale_error),
        mean_center_error: mean(&|m| m.left.center_error + m.right.center_error),
        hit_rate: results.iter().filter(|r| r.l_left + r.l_right < threshold).count() as f64 / n,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

pub fn markdown_table(rows: &[MethodSummary]) -> String {
    let mut s = String::from("| Method | L^left + L^right | Scale error | Center error | Below threshold | Pairs |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {} | {} | {:.2} | {} |",
            r.method,
            r.mean_sides_loss,
            fmt_opt(r.mean_scale_error),
            fmt_opt(r.mean_center_error),
            r.hit_rate,
            r.pairs
        );
    }
    s
}

pub fn csv_table(rows: &[MethodSummary]) -> String {
    let mut s = String::from("method,mean_sides_loss,mean_scale_error,mean_center_error,hit_rate,pairs\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{:.6},{},{},{:.6},{}",
            r.method,
            r.mean_sides_loss,
            opt(r.mean_scale_error),
            opt(r.mean_center_error),
            r.hit_rate,
            r.pairs
        );
    }
    s
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn eval(args: &EvalArgs, cfg: &Config) -> CliResult<()> {
    let t = load_template(&args.template)?;
    let neural = neural_parts(args.model.as_ref(), args.coarse_template.as_ref())?;
    let methods: Vec<Method> = if args.methods.is_empty() {
        Method::ALL
            .into_iter()
            .filter(|m| neural.is_some() || matches!(m, Method::Baseline | Method::GridSearch))
            .collect()
    } else {
        args.methods.clone()
    };
    let pairs = load_pairs(&args.data)?;
    let truth_path = args.data.join("truth.json");
    let truth: BTreeMap<String, GroundTruth> = if truth_path.exists() {
        let file: TruthFile = read_json(&truth_path)?;
        file.pairs.into_iter().map(|e| (e.name, e.truth)).collect()
    } else {
        BTreeMap::new()
    };
    let mut details = Vec::new();
    let mut rows = Vec::new();
    for &method in &methods {
        let mut results = Vec::with_capacity(pairs.len());
        for (name, l, r) in &pairs {
            let det = run_method(method, l, r, &t, neural.as_ref(), cfg)?;
            results.push(PairResult {
                name: name.clone(),
                method,
                l_left: det.left.loss,
                l_right: det.right.loss,
                total: det.total,
                metrics: truth.get(name).map(|g| score(&det, g, t.f())),
            });
        }
        rows.push(summarize(method, &results, cfg.acceptance_threshold));
        details.extend(results);
    }
    let md = markdown_table(&rows);
    match &args.markdown {
        Some(path) => write_text(path, &md)?,
        None => print!("{md}"),
    }
    if let Some(path) = &args.csv {
        write_text(path, &csv_table(&rows))?;
    }
    if let Some(path) = &args.details {
        write_json(&details, path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(l: f64, r: f64, metrics: Option<Metrics>) -> PairResult {
        PairResult {
            name: "p".into(),
            method: Method::Baseline,
            l_left: l,
            l_right: r,
            total: l + r,
            metrics,
        }
    }

    #[test]
    fn summary_averages_sides() {
        let s = summarize(Method::Baseline, &[result(0.1, 0.2, None), result(0.03, 0.05, None)], 0.1);
        assert!((s.mean_sides_loss - 0.19).abs() < 1e-12);
        assert_eq!(s.hit_rate, 0.5);
        assert_eq!(s.mean_scale_error, None);
        let md = markdown_table(&[s.clone()]);
        assert!(md.contains("| baseline | 0.1900 | - | - | 0.50 | 2 |"), "{md}");
        assert!(csv_table(&[s]).lines().nth(1).unwrap().starts_with("baseline,0.190000,,,0.500000,2"));
    }

    #[test]
    fn list_pairs_requires_both_sides() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::zeros(4, 4);
        save_png(&img, dir.path().join("b_left.png")).unwrap();
        save_png(&img, dir.path().join("b_right.png")).unwrap();
        save_png(&img, dir.path().join("a_left.png")).unwrap();
        let pairs = list_pairs(dir.path()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].0, "b");
        let empty = tempfile::tempdir().unwrap();
        assert_eq!(list_pairs(empty.path()).unwrap_err().exit_code(), 2);
    }
}
