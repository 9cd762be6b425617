//! CLI entry points, run configuration, evaluation loops, and report
//! persistence.
//!
//! One JSON document per run (top-level `schema` field versions the layout)
//! plus a flat CSV per sweep. Exit statuses: 0 success, 1 internal error,
//! 2 user or configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::ablation::{Geometry, GeometrySpec, PatternKind, Shape};
use crate::attack::{linf_ifgsm, patch_ifgsm, AttackConfig};
use crate::dataset::{encode_with_mask, load_idx_pair, Image, RawDataset};
use crate::error::{Error, Result};
use crate::model::{default_arch, train, LrPhase, ModelParams, TrainConfig, VoteConfig};
use crate::parallel::ordered_map;
use crate::randomized::{randomized_certify, EstimateConfig};
use crate::smoothing::{
    certify, classify, counts, vote, Certificate, ClassCounts, VoteMatrix, VoteMode,
};
use crate::synth::{write_idx_dataset, SynthConfig};

pub const REPORT_SCHEMA: &str = "certipatch-report/1";

#[derive(Parser, Debug)]
#[command(name = "certipatch", version, about = "Certified defense against patch attacks via structured ablation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a base classifier on ablated images and write a checkpoint.
    Train(TrainArgs),
    /// Certify a checkpoint over a dataset and write a JSON report.
    Certify(CertifyArgs),
    /// Grid sweep over (s, theta, m); writes per-cell reports and a CSV.
    Sweep(SweepArgs),
    /// Run empirical patch / L-infinity attacks against a checkpoint.
    Attack(AttackArgs),
    /// Print a checkpoint summary and certificate geometry as JSON.
    Inspect(InspectArgs),
    /// Generate a synthetic digit dataset in IDX format.
    GenData(GenDataArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum KindArg {
    Column,
    Row,
    Block,
    MultiColumn,
    MultiBlock,
    Sparse,
}

impl KindArg {
    fn to_kind(self) -> PatternKind {
        match self {
            KindArg::Column => PatternKind::ColumnBand,
            KindArg::Row => PatternKind::RowBand,
            KindArg::Block => PatternKind::Block,
            KindArg::MultiColumn => PatternKind::MultiColumn,
            KindArg::MultiBlock => PatternKind::MultiBlock,
            KindArg::Sparse => PatternKind::Sparse,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum ModeArg {
    /// Exhaustive position enumeration with threshold voting.
    Derandomized,
    /// Sampling-based estimation with a binomial lower bound.
    Randomized,
    /// Exhaustive enumeration with plain argmax voting.
    Top1,
}

#[derive(Args, Debug, Clone)]
pub struct GeometryArgs {
    /// Ablation pattern family.
    #[arg(long, value_enum, default_value = "column")]
    pub kind: KindArg,
    /// Retained band width / block side.
    #[arg(long, default_value_t = 2)]
    pub s: usize,
    /// Number of retained groups for the multi kinds.
    #[arg(long, default_value_t = 1)]
    pub kappa: usize,
    /// Retained pixel count for the sparse kind.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
}

impl GeometryArgs {
    pub fn spec(&self) -> GeometrySpec {
        GeometrySpec { kind: self.kind.to_kind(), s: self.s, kappa: self.kappa, k: self.k }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset_dir: PathBuf,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    /// Cap on total training epochs; truncates the schedule.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    /// Piecewise-constant schedule, e.g. "20@0.01,10@0.001".
    #[arg(long, default_value = "20@0.01,10@0.001")]
    pub lr_schedule: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Threshold for the stored vote configuration.
    #[arg(long, default_value_t = 0.3)]
    pub theta: f64,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Cap on training images; all by default.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CertifyArgs {
    #[arg(long)]
    pub dataset_dir: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long, default_value_t = 0.3)]
    pub theta: f64,
    #[arg(long, value_enum, default_value = "derandomized")]
    pub mode: ModeArg,
    /// Patch side length; repeatable.
    #[arg(long = "patch-m", default_values_t = [5usize])]
    pub patch_m: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    pub samples_select: usize,
    #[arg(long, default_value_t = 10000)]
    pub samples_bound: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Cap on evaluated images; all by default.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub dataset_dir: PathBuf,
    #[arg(long, value_enum, default_value = "column")]
    pub kind: KindArg,
    /// Grid of retained widths; repeatable.
    #[arg(long = "s", default_values_t = [2usize])]
    pub s: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub kappa: usize,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// Grid of vote thresholds; repeatable.
    #[arg(long = "theta", default_values_t = [0.3f64])]
    pub theta: Vec<f64>,
    /// Grid of patch sizes; repeatable.
    #[arg(long = "patch-m", default_values_t = [5usize])]
    pub patch_m: Vec<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value = "20@0.01,10@0.001")]
    pub lr_schedule: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for per-cell reports and summary.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Cap on training images; all by default.
    #[arg(long)]
    pub train_limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(long)]
    pub dataset_dir: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long, default_value_t = 0.3)]
    pub theta: f64,
    #[arg(long = "patch-m", default_values_t = [5usize])]
    pub patch_m: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 30)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    /// L-infinity budget; 0 disables the baseline attack.
    #[arg(long, default_value_t = 0.0)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Patch sizes to tabulate delta and affected counts for.
    #[arg(long = "patch-m", default_values_t = [3usize, 5, 7, 9])]
    pub patch_m: Vec<usize>,
    /// Optional JSON output path; stdout by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory for the IDX files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6000)]
    pub train: usize,
    #[arg(long, default_value_t = 1000)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Exit status for an error per the CLI contract.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Argument(_) | Error::Format(_) | Error::Geometry(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Certify(args) => cmd_certify(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Attack(args) => cmd_attack(&args),
        Command::Inspect(args) => cmd_inspect(&args),
        Command::GenData(args) => cmd_gen_data(&args),
    }
}

/// Parses "20@0.01,10@0.001" into schedule phases.
pub fn parse_lr_schedule(text: &str) -> Result<Vec<LrPhase>> {
    let mut phases = Vec::new();
    for part in text.split(',') {
        let (epochs, lr) = part
            .split_once('@')
            .ok_or_else(|| Error::Argument(format!("bad schedule phase {part:?}, want E@LR")))?;
        let epochs: usize = epochs
            .trim()
            .parse()
            .map_err(|_| Error::Argument(format!("bad epoch count {epochs:?}")))?;
        let lr: f64 = lr
            .trim()
            .parse()
            .map_err(|_| Error::Argument(format!("bad learning rate {lr:?}")))?;
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Argument(format!("negative learning rate {lr}")));
        }
        phases.push(LrPhase { epochs, lr });
    }
    Ok(phases)
}

/// Truncates a schedule to at most `cap` total epochs.
pub fn cap_schedule(mut phases: Vec<LrPhase>, cap: Option<usize>) -> Vec<LrPhase> {
    let Some(mut budget) = cap else { return phases };
    let mut out = Vec::new();
    for phase in phases.drain(..) {
        if budget == 0 {
            break;
        }
        let take = phase.epochs.min(budget);
        budget -= take;
        out.push(LrPhase { epochs: take, lr: phase.lr });
    }
    out
}

fn require_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::Argument(format!("missing dataset file {}", path.display())));
    }
    Ok(fs::read(path)?)
}

fn first_existing(dir: &Path, names: &[&str]) -> PathBuf {
    for name in names {
        let p = dir.join(name);
        if p.exists() {
            return p;
        }
    }
    dir.join(names[0])
}

/// Loads the train or test IDX pair from a dataset directory, accepting
/// either plain `.idx` names or the classic `-ubyte` names.
pub fn load_split(dir: &Path, split: &str) -> Result<RawDataset> {
    let (img_names, lbl_names): (Vec<&str>, Vec<&str>) = match split {
        "train" => (
            vec!["train-images.idx", "train-images-idx3-ubyte"],
            vec!["train-labels.idx", "train-labels-idx1-ubyte"],
        ),
        _ => (
            vec!["t10k-images.idx", "t10k-images-idx3-ubyte"],
            vec!["t10k-labels.idx", "t10k-labels-idx1-ubyte"],
        ),
    };
    let images = require_file(&first_existing(dir, &img_names))?;
    let labels = require_file(&first_existing(dir, &lbl_names))?;
    load_idx_pair(&images, &labels, 10)
}

fn truncated(mut data: RawDataset, limit: Option<usize>) -> RawDataset {
    if let Some(n) = limit {
        if n < data.len() {
            data.images.truncate(n);
            data.labels.truncate(n);
        }
    }
    data
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let data = truncated(load_split(&args.dataset_dir, "train")?, args.limit);
    let shape = data.images[0].shape();
    let channels = data.images[0].channels;
    let spec = args.geometry.spec();
    spec.with_shape(shape)?; // fail fast on inconsistent geometry
    let schedule = cap_schedule(parse_lr_schedule(&args.lr_schedule)?, args.epochs);
    let total_epochs: usize = schedule.iter().map(|p| p.epochs).sum();
    let train_cfg = TrainConfig {
        schedule,
        batch_size: args.batch,
        momentum: 0.9,
        weight_decay: 0.0005,
        seed: args.seed,
        geometry: spec,
    };
    let vote_cfg = VoteConfig { geometry: spec, mode: VoteMode::Threshold(args.theta) };
    let arch = default_arch(2 * channels, shape.height, shape.width, data.num_classes);
    let params = if total_epochs == 0 {
        eprintln!("warning: zero epochs requested; writing initialized weights");
        ModelParams::init(
            arch,
            shape.height,
            shape.width,
            2 * channels,
            data.num_classes,
            train_cfg,
            vote_cfg,
        )?
    } else {
        train(&data, arch, train_cfg, vote_cfg, |epoch, loss| {
            println!("epoch {epoch}: loss {loss:.6}");
        })?
    };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&args.out, params.save())?;
    println!("wrote checkpoint {}", args.out.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    if !path.exists() {
        return Err(Error::Argument(format!("missing checkpoint {}", path.display())));
    }
    ModelParams::load(&fs::read(path)?)
}

fn check_geometry_match(params: &ModelParams, spec: &GeometrySpec) -> Result<()> {
    let stored = &params.vote.geometry;
    if stored.kind != spec.kind || stored.s != spec.s || stored.kappa != spec.kappa {
        return Err(Error::Argument(format!(
            "checkpoint was trained for kind={} s={} kappa={}, requested kind={} s={} kappa={}",
            stored.kind.name(),
            stored.s,
            stored.kappa,
            spec.kind.name(),
            spec.s,
            spec.kappa
        )));
    }
    if spec.kind == PatternKind::Sparse && stored.k != spec.k {
        return Err(Error::Argument(format!(
            "checkpoint was trained for k={}, requested k={}",
            stored.k, spec.k
        )));
    }
    Ok(())
}

/// Per-image derandomized evaluation against precomputed retention masks.
fn derandomized_counts(
    params: &ModelParams,
    image: &Image,
    masks: &[Vec<bool>],
    mode: VoteMode,
) -> Result<ClassCounts> {
    let mut rows = Vec::with_capacity(masks.len());
    for mask in masks {
        let out = params.forward(&encode_with_mask(image, mask))?;
        rows.push(vote(&out, mode));
    }
    Ok(counts(&VoteMatrix { rows, num_classes: params.num_classes, mode }))
}

struct EvalRow {
    label: usize,
    predicted: usize,
    detail: Value,
    certified: Vec<bool>,
}

/// Shared evaluation loop for certify and sweep: one row per image, one
/// certified flag per requested patch size.
fn evaluate_derandomized(
    params: &ModelParams,
    geometry: &Geometry,
    data: &RawDataset,
    mode: VoteMode,
    patch_m: &[usize],
) -> Result<Vec<EvalRow>> {
    let masks: Vec<Vec<bool>> = geometry
        .enumerate_positions()?
        .iter()
        .map(|p| geometry.retained_mask(p))
        .collect::<Result<_>>()?;
    let items: Vec<usize> = (0..data.len()).collect();
    ordered_map(&items, |&idx| -> Result<EvalRow> {
        let image = &data.images[idx];
        let label = data.labels[idx] as usize;
        let class_counts = derandomized_counts(params, image, &masks, mode)?;
        let mut certificates: Vec<Certificate> = Vec::with_capacity(patch_m.len());
        for &m in patch_m {
            certificates.push(certify(&class_counts, geometry, m)?);
        }
        let predicted = classify(&class_counts);
        let max_m = certificates.first().map(|c| c.max_certified_m).unwrap_or(0);
        Ok(EvalRow {
            label,
            predicted,
            detail: json!({
                "counts": class_counts.n,
                "total_positions": class_counts.total_positions,
                "max_certified_m": max_m,
            }),
            certified: certificates.iter().map(|c| c.certified).collect(),
        })
    })
    .into_iter()
    .collect()
}

fn evaluate_randomized(
    params: &ModelParams,
    geometry: &Geometry,
    data: &RawDataset,
    patch_m: &[usize],
    estimate: &EstimateConfig,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let deltas: Vec<_> = patch_m.iter().map(|&m| geometry.delta(m)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(data.len());
    for (idx, (image, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        // one outcome per image; certification re-checked per delta
        let outcome = randomized_certify(
            params,
            image,
            geometry,
            &deltas[0],
            estimate,
            seed.wrapping_add(idx as u64),
        )?;
        let certified: Vec<bool> =
            deltas.iter().map(|d| outcome.p_lower > 0.5 + d.value()).collect();
        rows.push(EvalRow {
            label: label as usize,
            predicted: outcome.predicted,
            detail: json!({
                "p_lower": outcome.p_lower,
                "successes": outcome.successes,
                "bound_samples": outcome.bound_samples,
            }),
            certified,
        });
    }
    Ok(rows)
}

struct Aggregates {
    clean: f64,
    certified: Vec<f64>,
}

fn aggregate(rows: &[EvalRow], patch_m: &[usize]) -> Aggregates {
    let n = rows.len().max(1) as f64;
    let clean = rows.iter().filter(|r| r.predicted == r.label).count() as f64 / n;
    let certified = patch_m
        .iter()
        .enumerate()
        .map(|(i, _)| {
            rows.iter().filter(|r| r.predicted == r.label && r.certified[i]).count() as f64 / n
        })
        .collect();
    Aggregates { clean, certified }
}

fn report_rows(rows: &[EvalRow], patch_m: &[usize]) -> Vec<Value> {
    rows.iter()
        .enumerate()
        .map(|(idx, r)| {
            let certified: serde_json::Map<String, Value> = patch_m
                .iter()
                .zip(&r.certified)
                .map(|(m, &c)| (m.to_string(), Value::Bool(c)))
                .collect();
            json!({
                "index": idx,
                "label": r.label,
                "predicted": r.predicted,
                "detail": r.detail,
                "certified": certified,
            })
        })
        .collect()
}

fn certify_report(
    args: &CertifyArgs,
    params: &ModelParams,
    geometry: &Geometry,
    data: &RawDataset,
) -> Result<Value> {
    let started = Instant::now();
    let rows = match args.mode {
        ModeArg::Derandomized => evaluate_derandomized(
            params,
            geometry,
            data,
            VoteMode::Threshold(args.theta),
            &args.patch_m,
        )?,
        ModeArg::Top1 => {
            evaluate_derandomized(params, geometry, data, VoteMode::Top1, &args.patch_m)?
        }
        ModeArg::Randomized => {
            let estimate = EstimateConfig {
                selection_samples: args.samples_select,
                bound_samples: args.samples_bound,
                alpha: args.alpha,
            };
            evaluate_randomized(params, geometry, data, &args.patch_m, &estimate, args.seed)?
        }
    };
    let seconds = started.elapsed().as_secs_f64();
    let agg = aggregate(&rows, &args.patch_m);
    let certified: serde_json::Map<String, Value> = args
        .patch_m
        .iter()
        .zip(&agg.certified)
        .map(|(m, &a)| (m.to_string(), json!(a)))
        .collect();
    Ok(json!({
        "schema": REPORT_SCHEMA,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "command": "certify",
        "config": {
            "dataset_dir": args.dataset_dir.display().to_string(),
            "geometry": args.geometry.spec(),
            "theta": args.theta,
            "mode": format!("{:?}", args.mode).to_lowercase(),
            "patch_m": args.patch_m,
            "samples_select": args.samples_select,
            "samples_bound": args.samples_bound,
            "alpha": args.alpha,
            "seed": args.seed,
        },
        "rows": report_rows(&rows, &args.patch_m),
        "aggregates": {
            "images": data.len(),
            "clean_accuracy": agg.clean,
            "certified_accuracy": certified,
            "eval_seconds": seconds,
            "seconds_per_image": seconds / data.len().max(1) as f64,
        },
    }))
}

pub fn cmd_certify(args: &CertifyArgs) -> Result<()> {
    if args.patch_m.is_empty() {
        return Err(Error::Argument("at least one --patch-m is required".into()));
    }
    let params = load_checkpoint(&args.checkpoint)?;
    let spec = args.geometry.spec();
    check_geometry_match(&params, &spec)?;
    let data = truncated(load_split(&args.dataset_dir, "test")?, args.limit);
    if data.is_empty() {
        return Err(Error::Argument("no evaluation images".into()));
    }
    let geometry = spec.with_shape(data.images[0].shape())?;
    let report = certify_report(args, &params, &geometry, &data)?;
    write_json(&args.out, &report)?;
    let agg = &report["aggregates"];
    println!(
        "clean {:.4} certified {} over {} images ({:.3} s/image) -> {}",
        agg["clean_accuracy"].as_f64().unwrap_or(0.0),
        agg["certified_accuracy"],
        data.len(),
        agg["seconds_per_image"].as_f64().unwrap_or(0.0),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    if args.s.is_empty() || args.theta.is_empty() || args.patch_m.is_empty() {
        return Err(Error::Argument("sweep grids must be non-empty".into()));
    }
    fs::create_dir_all(&args.out)?;
    let train_data = truncated(load_split(&args.dataset_dir, "train")?, args.train_limit);
    let eval_data = truncated(load_split(&args.dataset_dir, "test")?, args.limit);
    if train_data.is_empty() || eval_data.is_empty() {
        return Err(Error::Argument("empty dataset".into()));
    }
    let shape = train_data.images[0].shape();
    let channels = train_data.images[0].channels;
    let schedule = cap_schedule(parse_lr_schedule(&args.lr_schedule)?, args.epochs);

    #[derive(Clone)]
    struct SummaryRow {
        s: usize,
        theta: f64,
        m: usize,
        clean: f64,
        certified: f64,
        error: String,
    }
    let mut summary: Vec<SummaryRow> = Vec::new();

    for &s in &args.s {
        let spec = GeometrySpec { kind: args.kind.to_kind(), s, kappa: args.kappa, k: args.k };
        let cell = (|| -> Result<(ModelParams, Geometry)> {
            let geometry = spec.with_shape(shape)?;
            let train_cfg = TrainConfig {
                schedule: schedule.clone(),
                batch_size: args.batch,
                momentum: 0.9,
                weight_decay: 0.0005,
                seed: args.seed,
                geometry: spec,
            };
            let vote_cfg = VoteConfig { geometry: spec, mode: VoteMode::Threshold(args.theta[0]) };
            let arch = default_arch(2 * channels, shape.height, shape.width, train_data.num_classes);
            let params = train(&train_data, arch, train_cfg, vote_cfg, |_, _| {})?;
            Ok((params, geometry))
        })();
        match cell {
            Err(e) => {
                eprintln!("sweep cell s={s} failed: {e}");
                for &theta in &args.theta {
                    for &m in &args.patch_m {
                        summary.push(SummaryRow {
                            s,
                            theta,
                            m,
                            clean: f64::NAN,
                            certified: f64::NAN,
                            error: e.to_string(),
                        });
                    }
                }
            }
            Ok((params, geometry)) => {
                for &theta in &args.theta {
                    let result = evaluate_derandomized(
                        &params,
                        &geometry,
                        &eval_data,
                        VoteMode::Threshold(theta),
                        &args.patch_m,
                    );
                    match result {
                        Err(e) => {
                            eprintln!("sweep cell s={s} theta={theta} failed: {e}");
                            for &m in &args.patch_m {
                                summary.push(SummaryRow {
                                    s,
                                    theta,
                                    m,
                                    clean: f64::NAN,
                                    certified: f64::NAN,
                                    error: e.to_string(),
                                });
                            }
                        }
                        Ok(rows) => {
                            let agg = aggregate(&rows, &args.patch_m);
                            let report = json!({
                                "schema": REPORT_SCHEMA,
                                "tool_version": env!("CARGO_PKG_VERSION"),
                                "command": "sweep-cell",
                                "config": {
                                    "geometry": spec, "theta": theta,
                                    "patch_m": args.patch_m, "seed": args.seed,
                                },
                                "rows": report_rows(&rows, &args.patch_m),
                                "aggregates": {
                                    "images": eval_data.len(),
                                    "clean_accuracy": agg.clean,
                                    "certified_accuracy": args.patch_m.iter().zip(&agg.certified)
                                        .map(|(m, &a)| (m.to_string(), json!(a)))
                                        .collect::<serde_json::Map<_, _>>(),
                                },
                            });
                            write_json(
                                &args.out.join(format!("report-s{s}-theta{theta}.json")),
                                &report,
                            )?;
                            for (i, &m) in args.patch_m.iter().enumerate() {
                                summary.push(SummaryRow {
                                    s,
                                    theta,
                                    m,
                                    clean: agg.clean,
                                    certified: agg.certified[i],
                                    error: String::new(),
                                });
                            }
                        }
                    }
                }
            }
        }
    }

    let best = summary
        .iter()
        .enumerate()
        .filter(|(_, r)| r.certified.is_finite())
        .max_by(|(_, a), (_, b)| a.certified.total_cmp(&b.certified))
        .map(|(i, _)| i);
    let mut writer = csv::Writer::from_path(args.out.join("summary.csv"))?;
    writer.write_record(["kind", "s", "theta", "m", "clean_accuracy", "certified_accuracy", "best", "error"])?;
    for (i, row) in summary.iter().enumerate() {
        writer.write_record([
            args.kind.to_kind().name().to_string(),
            row.s.to_string(),
            row.theta.to_string(),
            row.m.to_string(),
            row.clean.to_string(),
            row.certified.to_string(),
            (Some(i) == best).to_string(),
            row.error.clone(),
        ])?;
    }
    writer.flush()?;

    // soft check: does the best s depend on m?
    for &theta in &args.theta {
        let mut best_s_per_m: Vec<(usize, usize)> = Vec::new();
        for &m in &args.patch_m {
            if let Some(row) = summary
                .iter()
                .filter(|r| r.theta == theta && r.m == m && r.certified.is_finite())
                .max_by(|a, b| a.certified.total_cmp(&b.certified))
            {
                best_s_per_m.push((m, row.s));
            }
        }
        if best_s_per_m.windows(2).any(|w| w[0].1 != w[1].1) {
            eprintln!("note: best s varies with m at theta={theta}: {best_s_per_m:?}");
        }
    }
    println!("wrote {} summary rows -> {}", summary.len(), args.out.join("summary.csv").display());
    Ok(())
}

pub fn cmd_attack(args: &AttackArgs) -> Result<()> {
    let mut params = load_checkpoint(&args.checkpoint)?;
    let spec = args.geometry.spec();
    check_geometry_match(&params, &spec)?;
    params.vote.mode = VoteMode::Threshold(args.theta);
    let data = truncated(load_split(&args.dataset_dir, "test")?, args.limit);
    if data.is_empty() {
        return Err(Error::Argument("no evaluation images".into()));
    }
    let geometry = spec.with_shape(data.images[0].shape())?;
    let masks: Vec<Vec<bool>> = geometry
        .enumerate_positions()?
        .iter()
        .map(|p| geometry.retained_mask(p))
        .collect::<Result<_>>()?;
    let started = Instant::now();
    let mut report_m = serde_json::Map::new();
    for &m in &args.patch_m {
        let config = AttackConfig {
            restarts: args.restarts,
            iterations: args.iters,
            step: args.step,
            m,
            epsilon: args.epsilon,
            linf_iterations: args.iters,
            linf_step: args.step,
            seed: args.seed,
        };
        let mut rows = Vec::new();
        let mut correct = 0usize;
        let mut certified_count = 0usize;
        let mut robust = 0usize;
        let mut certified_broken = 0usize;
        let mut linf_robust = 0usize;
        for (idx, (image, &label)) in data.images.iter().zip(&data.labels).enumerate() {
            let label = label as usize;
            let class_counts =
                derandomized_counts(&params, image, &masks, params.vote.mode)?;
            let certificate = certify(&class_counts, &geometry, m)?;
            let is_correct = certificate.predicted == label;
            let is_certified = is_correct && certificate.certified;
            let mut patch_flipped = false;
            let mut linf_flipped = false;
            if is_correct {
                correct += 1;
                if is_certified {
                    certified_count += 1;
                }
                match patch_ifgsm(&params, image, label, &geometry, &config) {
                    Ok(outcome) => patch_flipped = outcome.is_some(),
                    Err(e) => eprintln!("attack failed on image {idx}: {e}"),
                }
                if !patch_flipped {
                    robust += 1;
                }
                if is_certified && patch_flipped {
                    certified_broken += 1;
                }
                if args.epsilon > 0.0 {
                    match linf_ifgsm(&params, image, label, &geometry, &config) {
                        Ok(outcome) => linf_flipped = outcome.is_some(),
                        Err(e) => eprintln!("linf attack failed on image {idx}: {e}"),
                    }
                    if !linf_flipped {
                        linf_robust += 1;
                    }
                }
            }
            rows.push(json!({
                "index": idx,
                "label": label,
                "predicted": certificate.predicted,
                "certified": is_certified,
                "patch_flipped": patch_flipped,
                "linf_flipped": linf_flipped,
            }));
        }
        let n = data.len() as f64;
        report_m.insert(
            m.to_string(),
            json!({
                "rows": rows,
                "clean_accuracy": correct as f64 / n,
                "certified_accuracy": certified_count as f64 / n,
                "empirical_accuracy_patch": robust as f64 / n,
                "empirical_accuracy_linf": if args.epsilon > 0.0 { json!(linf_robust as f64 / n) } else { Value::Null },
                "certified_broken": certified_broken,
            }),
        );
        if certified_broken > 0 {
            eprintln!("warning: {certified_broken} certified images flipped at m={m}");
        }
    }
    let seconds = started.elapsed().as_secs_f64();
    let report = json!({
        "schema": REPORT_SCHEMA,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "command": "attack",
        "config": {
            "geometry": spec, "theta": args.theta, "patch_m": args.patch_m,
            "restarts": args.restarts, "iters": args.iters, "step": args.step,
            "epsilon": args.epsilon, "seed": args.seed,
        },
        "by_patch_m": report_m,
        "aggregates": {
            "images": data.len(),
            "eval_seconds": seconds,
            "seconds_per_image": seconds / data.len() as f64,
        },
    });
    write_json(&args.out, &report)?;
    println!("attack report -> {}", args.out.display());
    Ok(())
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let params = load_checkpoint(&args.checkpoint)?;
    let shape = Shape::new(params.input_height, params.input_width);
    let geometry = params.vote.geometry.with_shape(shape)?;
    let mut table = Vec::new();
    for &m in &args.patch_m {
        if m > shape.height.min(shape.width) {
            continue;
        }
        let delta = geometry.delta(m)?;
        let entry = json!({
            "m": m,
            "delta": delta.value(),
            "delta_exact": format!("{}/{}", delta.numerator, delta.denominator),
            "affected_positions": geometry.affected_count(m)?.to_string(),
        });
        table.push(entry);
    }
    let weights: usize = params
        .tensors
        .iter()
        .flatten()
        .map(|(w, b)| w.len() + b.len())
        .sum();
    let summary = json!({
        "schema": REPORT_SCHEMA,
        "command": "inspect",
        "input": [params.input_height, params.input_width, params.input_channels],
        "num_classes": params.num_classes,
        "parameters": weights,
        "geometry": params.vote.geometry,
        "vote_mode": params.vote.mode,
        "total_positions": geometry.position_count().to_string(),
        "train": params.train,
        "delta_table": table,
    });
    match &args.out {
        Some(path) => write_json(path, &summary)?,
        None => println!("{}", serde_json::to_string_pretty(&summary)?),
    }
    Ok(())
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let config = SynthConfig { seed: args.seed, ..SynthConfig::default() };
    write_idx_dataset(&config, &args.out, args.train, args.test)?;
    println!(
        "wrote {} train / {} test images -> {}",
        args.train,
        args.test,
        args.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_parsing() {
        let phases = parse_lr_schedule("20@0.01,10@0.001").unwrap();
        assert_eq!(phases.len(), 2);
        assert_eq!(phases[0].epochs, 20);
        assert!((phases[1].lr - 0.001).abs() < 1e-15);
        assert!(parse_lr_schedule("20").is_err());
        assert!(parse_lr_schedule("x@0.1").is_err());
        assert!(parse_lr_schedule("5@-0.1").is_err());
    }

    #[test]
    fn schedule_capping() {
        let phases = parse_lr_schedule("20@0.01,10@0.001").unwrap();
        let capped = cap_schedule(phases.clone(), Some(25));
        assert_eq!(capped.iter().map(|p| p.epochs).sum::<usize>(), 25);
        assert_eq!(capped[1].epochs, 5);
        assert_eq!(cap_schedule(phases.clone(), Some(0)).len(), 0);
        assert_eq!(cap_schedule(phases.clone(), None).len(), 2);
        assert_eq!(cap_schedule(phases, Some(100)).iter().map(|p| p.epochs).sum::<usize>(), 30);
    }

    #[test]
    fn cli_parses_documented_flags() {
        let cli = Cli::try_parse_from([
            "certipatch", "certify",
            "--dataset-dir", "/tmp/data",
            "--checkpoint", "/tmp/model.ckpt",
            "--kind", "multi-column", "--s", "4", "--kappa", "2",
            "--theta", "0.2", "--mode", "top1",
            "--patch-m", "3", "--patch-m", "5",
            "--samples-select", "500", "--samples-bound", "2000", "--alpha", "0.01",
            "--seed", "7", "--out", "/tmp/report.json",
        ])
        .unwrap();
        match cli.command {
            Command::Certify(args) => {
                assert_eq!(args.geometry.kind, KindArg::MultiColumn);
                assert_eq!(args.geometry.s, 4);
                assert_eq!(args.patch_m, vec![3, 5]);
                assert_eq!(args.mode, ModeArg::Top1);
            }
            _ => panic!("wrong subcommand"),
        }
        let cli = Cli::try_parse_from([
            "certipatch", "attack",
            "--dataset-dir", "d", "--checkpoint", "c", "--out", "o",
            "--restarts", "3", "--iters", "10", "--step", "0.1", "--epsilon", "0.03",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::Attack(_)));
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&Error::Argument("x".into())), 2);
        assert_eq!(exit_code(&Error::Geometry("x".into())), 2);
        assert_eq!(exit_code(&Error::Format("x".into())), 2);
        assert_eq!(exit_code(&Error::Training("x".into())), 1);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 1);
    }

    #[test]
    fn missing_dataset_names_the_path() {
        let err = load_split(Path::new("/nonexistent-dir"), "train").unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
        assert!(err.to_string().contains("/nonexistent-dir"));
    }
}
