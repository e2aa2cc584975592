//! Subcommand front end: `gen`, `priors`, `train`, `train-classifier`,
//! `infer`, `eval`. Every hyperparameter can also come from a `key=value`
//! config file (`--config`); explicit flags win over the file, the file
//! wins over built-in defaults. Seeds are mandatory flags on every command
//! that draws random numbers — there are no entropy defaults, so reruns
//! with identical inputs and flags are byte-identical.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 I/O or file-format
//! failure, 4 infeasible data (e.g. more objects than slots). Failures
//! print exactly one machine-parsable line on stderr:
//! `error kind=<kind> exit=<code> detail="..."`.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{
    build_classifier_dataset, generate_scenes, load_scenes, localizer_example,
    make_classifier_crops, sample_crops_bucketed, save_scenes, Scene, SceneConfig,
};
use crate::error::{MultiboxError, Result};
use crate::evalkit::{
    average_precision, budget_curve, detection_at_k, match_detections, mean_average_precision,
    per_class_average_precision, write_budget_curve_csv, write_pr_csv, write_summary_csv,
    ApStyle, EvalImage, TopKImage,
};
use crate::geometry::CropWindow;
use crate::loss::MatchMode;
use crate::postprocess::{
    localize_image, save_detections, score_detections, CropStrategy, ImageDetections,
    SquareRegion,
};
use crate::predictor::{
    classify_crop, evaluate_loss, load_classifier_checkpoint, load_localizer_checkpoint,
    save_classifier_checkpoint, save_localizer_checkpoint, train_classifier, train_localizer,
    write_training_log, ClassifierExample, ClassifierTopology, ClassifierTrainConfig,
    LocalizerExample, LocalizerTopology, TrainConfig,
};
use crate::priors::{fit_priors, load_priors, save_priors};

/// RNG stream salts so crop sampling and holdout selection never collide
/// with the model-init/shuffle streams derived from the same user seed.
const CROP_STREAM: u64 = 0x6372_6f70_5f73_616d;
const HOLDOUT_STREAM: u64 = 0x686f_6c64_6f75_7431;

// ---------------------------------------------------------------------------
// Argument surface.

#[derive(Parser)]
#[command(
    name = "multibox",
    version,
    about = "Class-agnostic multibox detection: synthetic scenes, k-means box priors, \
             matching-loss training, multi-crop inference, and detection metrics."
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenes file plus its raster sidecar.
    Gen(GenArgs),
    /// Fit k-means box priors over all ground-truth boxes of a scenes file.
    Priors(PriorsArgs),
    /// Train the localizer (bipartite matching loss, Adagrad) on scene crops.
    Train(TrainArgs),
    /// Train the crop classifier (shape classes plus background).
    TrainClassifier(TrainClassifierArgs),
    /// Run multi-crop localization (optionally classification) over scenes.
    Infer(InferArgs),
    /// Score a detections file against ground truth and write metric CSVs.
    Eval(EvalArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Key=value defaults file; explicit flags override its entries.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Pin fully serial, bit-reproducible execution (this is already the
    /// only execution mode; the flag records the requirement in scripts).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct GenArgs {
    /// Output scenes file; the raster sidecar lands next to it.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Number of scenes [default: 1000].
    #[arg(long)]
    n: Option<usize>,
    /// Shape classes in use, 1..=3 [default: 3].
    #[arg(long)]
    classes: Option<usize>,
    /// Maximum objects per scene [default: 4].
    #[arg(long)]
    m_max: Option<usize>,
    /// Raster side in pixels [default: 64].
    #[arg(long)]
    size: Option<usize>,
    /// Minimum object side as image fraction [default: 0.14].
    #[arg(long)]
    side_min: Option<f64>,
    /// Maximum object side as image fraction [default: 0.45].
    #[arg(long)]
    side_max: Option<f64>,
    /// Additive pixel noise amplitude [default: 0.03].
    #[arg(long)]
    noise: Option<f64>,
    /// Largest pairwise box overlap placement accepts [default: 0.25].
    #[arg(long)]
    max_overlap: Option<f64>,
    /// RNG seed (mandatory; per-scene streams derive from it).
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct PriorsArgs {
    /// Input scenes file.
    #[arg(long, value_name = "FILE")]
    scenes: PathBuf,
    /// Output priors file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Number of priors (prediction slots) [default: 16].
    #[arg(long)]
    k: Option<usize>,
    /// RNG seed for k-means++ initialization (mandatory).
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Input scenes file.
    #[arg(long, value_name = "FILE")]
    scenes: PathBuf,
    /// Priors file fitted by `priors`; its k sets the slot count.
    #[arg(long, value_name = "FILE")]
    priors: PathBuf,
    /// Output checkpoint file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Training-log CSV [default: checkpoint path with .log.csv].
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
    /// Localization loss weight, > 0 [default: 0.3].
    #[arg(long)]
    alpha: Option<f64>,
    /// Adagrad learning rate [default: 0.05].
    #[arg(long)]
    lr: Option<f64>,
    /// Minibatch size [default: 128].
    #[arg(long)]
    batch: Option<usize>,
    /// Training steps [default: 2000].
    #[arg(long)]
    steps: Option<usize>,
    /// First hidden width [default: 128].
    #[arg(long)]
    hidden1: Option<usize>,
    /// Second hidden width [default: 64].
    #[arg(long)]
    hidden2: Option<usize>,
    /// Crop resampling side; model input is its square [default: 32].
    #[arg(long)]
    input_side: Option<usize>,
    /// Assignment source: priors (slot diversification) or predictions.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Coverage-bucketed crops sampled per bucket per scene [default: 1].
    #[arg(long)]
    crops_per_bucket: Option<usize>,
    /// Held-out example fraction, in [0,1) [default: 0.10].
    #[arg(long)]
    holdout: Option<f64>,
    /// RNG seed for init, shuffling, crops, holdout (mandatory).
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct TrainClassifierArgs {
    /// Input scenes file.
    #[arg(long, value_name = "FILE")]
    scenes: PathBuf,
    /// Output checkpoint file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Training-log CSV [default: checkpoint path with .log.csv].
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
    /// Adagrad learning rate [default: 0.05].
    #[arg(long)]
    lr: Option<f64>,
    /// Minibatch size [default: 128].
    #[arg(long)]
    batch: Option<usize>,
    /// Training steps [default: 2000].
    #[arg(long)]
    steps: Option<usize>,
    /// First hidden width [default: 128].
    #[arg(long)]
    hidden1: Option<usize>,
    /// Second hidden width [default: 64].
    #[arg(long)]
    hidden2: Option<usize>,
    /// Crop resampling side [default: 32].
    #[arg(long)]
    input_side: Option<usize>,
    /// Minimum overlap of a jittered positive with its source box [default: 0.5].
    #[arg(long)]
    pos_iou: Option<f64>,
    /// Maximum overlap of a negative with any ground truth [default: 0.2].
    #[arg(long)]
    neg_iou: Option<f64>,
    /// Held-out example fraction, in [0,1) [default: 0.10].
    #[arg(long)]
    holdout: Option<f64>,
    /// RNG seed (mandatory).
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct InferArgs {
    /// Input scenes file.
    #[arg(long, value_name = "FILE")]
    scenes: PathBuf,
    /// Priors file matching the checkpoint's slot count.
    #[arg(long, value_name = "FILE")]
    priors: PathBuf,
    /// Localizer checkpoint.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Optional classifier checkpoint; when given, detections are
    /// classified and background hits are dropped.
    #[arg(long, value_name = "FILE")]
    classifier: Option<PathBuf>,
    /// Output detections file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Crop layout [default: max_center].
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// NMS Jaccard threshold in [0,1] [default: 0.5].
    #[arg(long)]
    nms: Option<f64>,
    /// Detections kept per image after NMS [default: 10].
    #[arg(long)]
    top_n: Option<usize>,
    /// Classifier crop region [default: max].
    #[arg(long, value_enum)]
    square: Option<SquareArg>,
    /// Accepted for invocation symmetry; inference draws no random numbers.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Detections file produced by `infer`.
    #[arg(long, value_name = "FILE")]
    detections: PathBuf,
    /// Scenes file holding the ground truth.
    #[arg(long, value_name = "FILE")]
    scenes: PathBuf,
    /// Directory for budget_curve.csv, pr_<class>.csv, summary.csv [default: .].
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Matching IoU threshold in (0,1] [default: 0.5].
    #[arg(long)]
    iou: Option<f64>,
    /// Largest per-image box budget for the budget curve [default: 10].
    #[arg(long)]
    budget: Option<usize>,
    /// k for detection@k over classified detections [default: 5].
    #[arg(long)]
    k: Option<usize>,
    /// Accepted for invocation symmetry; evaluation draws no random numbers.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    #[value(name = "max_center")]
    MaxCenter,
    #[value(name = "two_scale")]
    TwoScale,
}

impl FromStr for StrategyArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "max_center" => Ok(StrategyArg::MaxCenter),
            "two_scale" => Ok(StrategyArg::TwoScale),
            other => Err(format!("unknown strategy {other:?} (max_center|two_scale)")),
        }
    }
}

impl From<StrategyArg> for CropStrategy {
    fn from(s: StrategyArg) -> CropStrategy {
        match s {
            StrategyArg::MaxCenter => CropStrategy::MaxCenter,
            StrategyArg::TwoScale => CropStrategy::TwoScale,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    #[value(name = "prior_matching")]
    PriorMatching,
    #[value(name = "direct")]
    Direct,
}

impl FromStr for ModeArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "prior_matching" => Ok(ModeArg::PriorMatching),
            "direct" => Ok(ModeArg::Direct),
            other => Err(format!("unknown mode {other:?} (prior_matching|direct)")),
        }
    }
}

impl From<ModeArg> for MatchMode {
    fn from(m: ModeArg) -> MatchMode {
        match m {
            ModeArg::PriorMatching => MatchMode::PriorMatching,
            ModeArg::Direct => MatchMode::Direct,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SquareArg {
    #[value(name = "max")]
    Max,
    #[value(name = "min")]
    Min,
}

impl FromStr for SquareArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "max" => Ok(SquareArg::Max),
            "min" => Ok(SquareArg::Min),
            other => Err(format!("unknown square region {other:?} (max|min)")),
        }
    }
}

impl From<SquareArg> for SquareRegion {
    fn from(s: SquareArg) -> SquareRegion {
        match s {
            SquareArg::Max => SquareRegion::Max,
            SquareArg::Min => SquareRegion::Min,
        }
    }
}

// ---------------------------------------------------------------------------
// Config-file merging.

struct Settings {
    map: HashMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Settings> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    MultiboxError::InvalidConfig(format!(
                        "config line {}: expected key=value, got {raw:?}",
                        lineno + 1
                    ))
                })?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Settings { map })
    }

    /// Flag > config file > default.
    fn get<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.map.get(key) {
            Some(raw) => raw.parse().map_err(|_| {
                MultiboxError::InvalidConfig(format!("config key {key}: cannot parse {raw:?}"))
            }),
            None => Ok(default),
        }
    }
}

// ---------------------------------------------------------------------------
// Validation helpers.

fn check(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(MultiboxError::InvalidConfig(msg.into()))
    }
}

fn unit_interval(value: f64, name: &str) -> Result<()> {
    check((0.0..=1.0).contains(&value), format!("{name} must be in [0,1], got {value}"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Seeded holdout split: shuffles indices and carves off the first
/// `fraction` as the holdout set; both halves keep dataset order.
fn split_holdout<T: Clone>(items: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let h = (items.len() as f64 * fraction).floor() as usize;
    let mut holdout_idx: Vec<usize> = idx[..h].to_vec();
    let mut train_idx: Vec<usize> = idx[h..].to_vec();
    holdout_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect();
    (pick(&train_idx), pick(&holdout_idx))
}

// ---------------------------------------------------------------------------
// Entry points and error mapping.

/// Exit code a failure maps to: 2 invalid configuration, 3 I/O or file
/// format, 4 infeasible data.
pub fn exit_code(err: &MultiboxError) -> i32 {
    match err {
        MultiboxError::InvalidConfig(_)
        | MultiboxError::MissingPriors
        | MultiboxError::ShapeMismatch { .. }
        | MultiboxError::InvalidAssignment(_) => 2,
        MultiboxError::Io(_) | MultiboxError::Format { .. } => 3,
        MultiboxError::InfeasibleMatch { .. }
        | MultiboxError::TooFewBoxes { .. }
        | MultiboxError::LabelOutOfRange { .. }
        | MultiboxError::ZeroGroundTruth { .. }
        | MultiboxError::DuplicateClassInTopK { .. } => 4,
    }
}

fn error_kind(err: &MultiboxError) -> &'static str {
    match err {
        MultiboxError::InvalidConfig(_) => "invalid_config",
        MultiboxError::MissingPriors => "missing_priors",
        MultiboxError::ShapeMismatch { .. } => "shape_mismatch",
        MultiboxError::InvalidAssignment(_) => "invalid_assignment",
        MultiboxError::Io(_) => "io",
        MultiboxError::Format { .. } => "format",
        MultiboxError::InfeasibleMatch { .. } => "infeasible_match",
        MultiboxError::TooFewBoxes { .. } => "too_few_boxes",
        MultiboxError::LabelOutOfRange { .. } => "label_out_of_range",
        MultiboxError::ZeroGroundTruth { .. } => "zero_ground_truth",
        MultiboxError::DuplicateClassInTopK { .. } => "duplicate_class_in_top_k",
    }
}

/// The single-line diagnostic printed to stderr on failure.
pub fn error_line(err: &MultiboxError) -> String {
    let detail = err.to_string().replace('\n', " ").replace('"', "'");
    format!("error kind={} exit={} detail=\"{detail}\"", error_kind(err), exit_code(err))
}

/// Runs the CLI on explicit arguments and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version to stdout (exit 0) and usage errors
            // to stderr (exit 2).
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Priors(args) => cmd_priors(args),
        Command::Train(args) => cmd_train(args),
        Command::TrainClassifier(args) => cmd_train_classifier(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("{}", error_line(&err));
            exit_code(&err)
        }
    }
}

/// Runs the CLI on the process arguments.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

// ---------------------------------------------------------------------------
// Subcommands.

fn cmd_gen(args: GenArgs) -> Result<()> {
    let s = Settings::load(args.common.config.as_deref())?;
    let config = SceneConfig {
        n_scenes: s.get(args.n, "n", 1000)?,
        classes: s.get(args.classes, "classes", 3)?,
        m_max: s.get(args.m_max, "m_max", 4)?,
        size: s.get(args.size, "size", 64)?,
        seed: args.seed,
        side_min: s.get(args.side_min, "side_min", 0.14)?,
        side_max: s.get(args.side_max, "side_max", 0.45)?,
        noise: s.get(args.noise, "noise", 0.03)?,
        max_overlap: s.get(args.max_overlap, "max_overlap", 0.25)?,
    };
    let scenes = generate_scenes(&config)?;
    ensure_parent(&args.out)?;
    save_scenes(&args.out, &scenes, config.classes)?;

    let mut counts = vec![0usize; config.classes];
    for scene in &scenes {
        for o in &scene.objects {
            counts[o.class_label] += 1;
        }
    }
    let histogram: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
    println!(
        "generated scenes={} classes={} objects={} class_counts={} out={}",
        scenes.len(),
        config.classes,
        counts.iter().sum::<usize>(),
        histogram.join("/"),
        args.out.display()
    );
    Ok(())
}

fn cmd_priors(args: PriorsArgs) -> Result<()> {
    let s = Settings::load(args.common.config.as_deref())?;
    let k = s.get(args.k, "k", 16)?;
    check(k >= 1, "k must be >= 1")?;
    let (scenes, _) = load_scenes(&args.scenes)?;
    let boxes: Vec<_> = scenes.iter().flat_map(|sc| sc.objects.iter().map(|o| o.bbox)).collect();
    let mut set = fit_priors(&boxes, k, args.seed)?;
    set.set_source(format!("kmeans boxes={}", boxes.len()));
    ensure_parent(&args.out)?;
    save_priors(&args.out, &set)?;
    let fit = set.meta().fit.as_ref().expect("fitted priors carry stats");
    println!(
        "priors k={} boxes={} iterations={} objective={} out={}",
        set.k(),
        boxes.len(),
        fit.iterations,
        fit.objective,
        args.out.display()
    );
    Ok(())
}

/// Training examples for one scenes file: the identity window of every
/// scene plus its coverage-bucketed crops.
fn training_examples(
    scenes: &[Scene],
    crops_per_bucket: usize,
    input_side: usize,
    seed: u64,
) -> (Vec<LocalizerExample>, usize) {
    let mut examples = Vec::new();
    let mut unfillable = 0usize;
    for scene in scenes {
        examples.push(localizer_example(scene, &CropWindow::full(), input_side));
        let (samples, reports) =
            sample_crops_bucketed(scene, crops_per_bucket, seed ^ CROP_STREAM ^ scene.image_id);
        unfillable += reports.iter().filter(|r| r.unfillable).count();
        for sample in &samples {
            examples.push(localizer_example(scene, &sample.window, input_side));
        }
    }
    (examples, unfillable)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let s = Settings::load(args.common.config.as_deref())?;
    let alpha = s.get(args.alpha, "alpha", 0.3)?;
    let lr = s.get(args.lr, "lr", 0.05)?;
    let batch = s.get(args.batch, "batch", 128)?;
    let steps = s.get(args.steps, "steps", 2000)?;
    let hidden1 = s.get(args.hidden1, "hidden1", 128)?;
    let hidden2 = s.get(args.hidden2, "hidden2", 64)?;
    let input_side = s.get(args.input_side, "input_side", 32)?;
    let mode: ModeArg = s.get(args.mode, "mode", ModeArg::PriorMatching)?;
    let crops_per_bucket = s.get(args.crops_per_bucket, "crops_per_bucket", 1)?;
    let holdout = s.get(args.holdout, "holdout", 0.10)?;

    check(alpha > 0.0, format!("alpha must be > 0, got {alpha}"))?;
    check(lr > 0.0, format!("lr must be > 0, got {lr}"))?;
    check(batch >= 1, "batch must be >= 1")?;
    check(hidden1 >= 1 && hidden2 >= 1, "hidden widths must be >= 1")?;
    check(input_side >= 1, "input_side must be >= 1")?;
    check((0.0..1.0).contains(&holdout), format!("holdout must be in [0,1), got {holdout}"))?;

    let (scenes, _) = load_scenes(&args.scenes)?;
    let priors = load_priors(&args.priors)?;
    let (examples, unfillable) =
        training_examples(&scenes, crops_per_bucket, input_side, args.seed);
    let (train_set, holdout_set) = split_holdout(&examples, holdout, args.seed ^ HOLDOUT_STREAM);
    check(!train_set.is_empty(), "no training examples after holdout split")?;

    let topo = LocalizerTopology {
        input: input_side * input_side,
        hidden1,
        hidden2,
        k: priors.k(),
    };
    let config = TrainConfig {
        alpha,
        lr,
        batch_size: batch,
        steps,
        seed: args.seed,
        mode: mode.into(),
    };
    let (params, log) = train_localizer(&train_set, &priors, topo, &config)?;

    ensure_parent(&args.out)?;
    save_localizer_checkpoint(&args.out, &params)?;
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("log.csv"));
    ensure_parent(&log_path)?;
    let mut w = BufWriter::new(File::create(&log_path)?);
    write_training_log(&mut w, &log)?;

    let final_f = log.last().map(|r| r.f_total);
    let holdout_f = if holdout_set.is_empty() {
        None
    } else {
        Some(evaluate_loss(&params, &holdout_set, &priors, alpha, mode.into())?)
    };
    println!(
        "trained steps={} k={} train_examples={} holdout_examples={} unfillable_buckets={} \
         final_f_total={} holdout_f_total={} ckpt={} log={}",
        steps,
        priors.k(),
        train_set.len(),
        holdout_set.len(),
        unfillable,
        final_f.map(|v| v.to_string()).unwrap_or_else(|| "n/a".into()),
        holdout_f.map(|v| v.to_string()).unwrap_or_else(|| "n/a".into()),
        args.out.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_train_classifier(args: TrainClassifierArgs) -> Result<()> {
    let s = Settings::load(args.common.config.as_deref())?;
    let lr = s.get(args.lr, "lr", 0.05)?;
    let batch = s.get(args.batch, "batch", 128)?;
    let steps = s.get(args.steps, "steps", 2000)?;
    let hidden1 = s.get(args.hidden1, "hidden1", 128)?;
    let hidden2 = s.get(args.hidden2, "hidden2", 64)?;
    let input_side = s.get(args.input_side, "input_side", 32)?;
    let pos_iou = s.get(args.pos_iou, "pos_iou", 0.5)?;
    let neg_iou = s.get(args.neg_iou, "neg_iou", 0.2)?;
    let holdout = s.get(args.holdout, "holdout", 0.10)?;

    check(lr > 0.0, format!("lr must be > 0, got {lr}"))?;
    check(batch >= 1, "batch must be >= 1")?;
    check(hidden1 >= 1 && hidden2 >= 1, "hidden widths must be >= 1")?;
    check(input_side >= 1, "input_side must be >= 1")?;
    unit_interval(pos_iou, "pos_iou")?;
    unit_interval(neg_iou, "neg_iou")?;
    check((0.0..1.0).contains(&holdout), format!("holdout must be in [0,1), got {holdout}"))?;

    let (scenes, classes) = load_scenes(&args.scenes)?;
    check(classes >= 1, "scenes file declares zero classes")?;
    let crops = make_classifier_crops(&scenes, classes, pos_iou, neg_iou, args.seed ^ CROP_STREAM)?;
    let examples = build_classifier_dataset(&scenes, &crops, input_side)?;
    let (train_set, holdout_set) = split_holdout(&examples, holdout, args.seed ^ HOLDOUT_STREAM);
    check(!train_set.is_empty(), "no training examples after holdout split")?;

    let topo = ClassifierTopology {
        input: input_side * input_side,
        hidden1,
        hidden2,
        outputs: classes + 1,
    };
    let config = ClassifierTrainConfig { lr, batch_size: batch, steps, seed: args.seed };
    let (params, log) = train_classifier(&train_set, topo, &config)?;

    ensure_parent(&args.out)?;
    save_classifier_checkpoint(&args.out, &params)?;
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("log.csv"));
    ensure_parent(&log_path)?;
    let mut w = BufWriter::new(File::create(&log_path)?);
    write_training_log(&mut w, &log)?;

    let holdout_report = if holdout_set.is_empty() {
        "holdout_ce=n/a holdout_accuracy=n/a".to_string()
    } else {
        let (ce, acc) = classifier_holdout_metrics(&params, &holdout_set)?;
        format!("holdout_ce={ce} holdout_accuracy={acc}")
    };
    println!(
        "trained-classifier steps={} classes={} train_examples={} holdout_examples={} {} ckpt={} log={}",
        steps,
        classes,
        train_set.len(),
        holdout_set.len(),
        holdout_report,
        args.out.display(),
        log_path.display()
    );
    Ok(())
}

fn classifier_holdout_metrics(
    params: &crate::predictor::ClassifierParams,
    holdout: &[ClassifierExample],
) -> Result<(f64, f64)> {
    let mut ce = 0.0;
    let mut correct = 0usize;
    for ex in holdout {
        let probs = classify_crop(params, &ex.pixels)?;
        ce += -(probs[ex.label].max(1e-300)).ln();
        let mut argmax = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[argmax] {
                argmax = i;
            }
        }
        if argmax == ex.label {
            correct += 1;
        }
    }
    let n = holdout.len() as f64;
    Ok((ce / n, correct as f64 / n))
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let s = Settings::load(args.common.config.as_deref())?;
    let strategy: StrategyArg = s.get(args.strategy, "strategy", StrategyArg::MaxCenter)?;
    let nms_threshold = s.get(args.nms, "nms", 0.5)?;
    let top_n = s.get(args.top_n, "top_n", 10)?;
    let square: SquareArg = s.get(args.square, "square", SquareArg::Max)?;
    unit_interval(nms_threshold, "nms")?;

    let (scenes, _) = load_scenes(&args.scenes)?;
    let priors = load_priors(&args.priors)?;
    let params = load_localizer_checkpoint(&args.checkpoint)?;
    if params.topology().k != priors.k() {
        return Err(MultiboxError::ShapeMismatch {
            what: "checkpoint slots vs priors",
            expected: priors.k(),
            actual: params.topology().k,
        });
    }
    let classifier = match &args.classifier {
        Some(path) => Some(load_classifier_checkpoint(path)?),
        None => None,
    };

    let mut images = Vec::with_capacity(scenes.len());
    let mut total = 0usize;
    for scene in &scenes {
        let mut dets = localize_image(
            &scene.raster,
            &params,
            &priors,
            strategy.into(),
            nms_threshold,
            top_n,
        )?;
        if let Some(cls) = &classifier {
            dets = score_detections(&dets, cls, &scene.raster, square.into())?;
        }
        total += dets.len();
        images.push(ImageDetections { image_id: scene.image_id, detections: dets });
    }
    ensure_parent(&args.out)?;
    save_detections(&args.out, &images)?;
    println!(
        "inferred images={} detections={} classified={} out={}",
        scenes.len(),
        total,
        classifier.is_some(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let s = Settings::load(args.common.config.as_deref())?;
    let out_dir = args.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let iou = s.get(args.iou, "iou", 0.5)?;
    let budget = s.get(args.budget, "budget", 10)?;
    let k = s.get(args.k, "k", 5)?;
    unit_interval(iou, "iou")?;
    check(iou > 0.0, "iou must be > 0")?;
    check(budget >= 1, "budget must be >= 1")?;
    check(k >= 1, "k must be >= 1")?;

    let detections = crate::postprocess::load_detections(&args.detections)?;
    let (scenes, _) = load_scenes(&args.scenes)?;

    for im in &detections {
        if !scenes.iter().any(|sc| sc.image_id == im.image_id) {
            eprintln!(
                "warning image {} appears in detections but not in scenes; ignored",
                im.image_id
            );
        }
    }
    let images: Vec<EvalImage> = scenes
        .iter()
        .map(|scene| EvalImage {
            detections: detections
                .iter()
                .find(|im| im.image_id == scene.image_id)
                .map(|im| im.detections.clone())
                .unwrap_or_default(),
            gt: scene.objects.clone(),
        })
        .collect();
    let total_gt: usize = images.iter().map(|im| im.gt.len()).sum();

    fs::create_dir_all(&out_dir)?;
    let curve = budget_curve(&images, iou, budget);
    let mut w = BufWriter::new(File::create(out_dir.join("budget_curve.csv"))?);
    write_budget_curve_csv(&mut w, &curve)?;

    let mut summary: Vec<(String, f64)> = Vec::new();
    summary.push((format!("detection_rate_at_{budget}"), curve.rate_at(budget)));

    // Class-agnostic AP over all detections.
    if total_gt > 0 {
        let mut scored = Vec::new();
        for im in &images {
            for m in match_detections(&im.detections, &im.gt, iou, false) {
                scored.push((m.detection.score(), m.is_true_positive));
            }
        }
        let agnostic = average_precision(&scored, total_gt, ApStyle::Voc2007_11pt)?;
        summary.push(("agnostic_ap".into(), agnostic.ap));
    } else {
        eprintln!("warning no ground truth in scenes; AP metrics absent");
    }

    // Per-class metrics only exist once detections carry class labels.
    let classified = images
        .iter()
        .any(|im| im.detections.iter().any(|d| d.class_label.is_some()));
    if classified {
        let per_class = per_class_average_precision(&images, iou, ApStyle::Voc2007_11pt);
        let mut det_classes: Vec<usize> = images
            .iter()
            .flat_map(|im| im.detections.iter().filter_map(|d| d.class_label))
            .collect();
        det_classes.sort_unstable();
        det_classes.dedup();
        for class in det_classes {
            if !per_class.contains_key(&class) {
                eprintln!("warning class {class} has detections but no ground truth; AP absent");
            }
        }
        for (class, curve) in &per_class {
            let mut w = BufWriter::new(File::create(out_dir.join(format!("pr_{class}.csv")))?);
            write_pr_csv(&mut w, curve)?;
            summary.push((format!("ap_{class}"), curve.ap));
        }
        if let Some(map) = mean_average_precision(&per_class) {
            summary.push(("map".into(), map));
        }

        // detection@k over per-image best pair per class.
        let topk: Vec<TopKImage> = scenes
            .iter()
            .zip(&images)
            .map(|(scene, im)| {
                let mut best: HashMap<usize, &crate::postprocess::Detection> = HashMap::new();
                for d in &im.detections {
                    if let Some(c) = d.class_label {
                        let better = best.get(&c).map_or(true, |b| d.score() > b.score());
                        if better {
                            best.insert(c, d);
                        }
                    }
                }
                let mut pairs: Vec<(usize, &crate::postprocess::Detection)> =
                    best.into_iter().collect();
                pairs.sort_by(|a, b| {
                    b.1.score().total_cmp(&a.1.score()).then(a.0.cmp(&b.0))
                });
                TopKImage {
                    image_id: scene.image_id,
                    pairs: pairs.into_iter().map(|(c, d)| (c, d.bbox)).collect(),
                    gt: im.gt.clone(),
                }
            })
            .collect();
        summary.push((format!("detection_at_{k}"), detection_at_k(&topk, k)?));
    }

    let mut w = BufWriter::new(File::create(out_dir.join("summary.csv"))?);
    write_summary_csv(&mut w, &summary)?;

    let pretty: Vec<String> =
        summary.iter().map(|(m, v)| format!("{m}={v}")).collect();
    println!(
        "evaluated images={} gt={} {} out_dir={}",
        images.len(),
        total_gt,
        pretty.join(" "),
        out_dir.display()
    );
    Ok(())
}
