//! Command-line front end: `train`, `interpolate`, `evaluate`, `cost`, and
//! `make-synthetic`.
//!
//! Exit codes: 0 on success, 1 on user errors (bad arguments, missing or
//! malformed inputs), 2 on internal failures. The `MIDFRAME_LOG_LEVEL`
//! environment variable (`debug` | `info` | `warn`) controls log verbosity.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::ArrayD;
use serde_json::json;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig, Stage};
use crate::cost::{cost_report, ArchVariant, DecoderKind};
use crate::data::{
    generate_synthetic_triplets, load_png, load_vimeo_triplets, save_png, write_vimeo_layout,
    AugmentationPolicy, DataError, MotionSpec, Triplet,
};
use crate::metrics::{psnr, ssim, MetricError};
use crate::model::{FlowMode, Model, ModelError};
use crate::trainer::{finetune_hd, train_stage1, train_stage2, EvalRow, TrainError};

const LOG_LEVEL_ENV: &str = "MIDFRAME_LOG_LEVEL";

#[derive(Parser)]
#[command(name = "midframe", version, about = "Midpoint frame interpolation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage on a triplet dataset.
    Train(TrainArgs),
    /// Predict the midpoint frame between two images.
    Interpolate(InterpolateArgs),
    /// Score a checkpoint over a triplet dataset.
    Evaluate(EvaluateArgs),
    /// Analytic parameter and FLOP counts for a configuration.
    Cost(CostArgs),
    /// Generate a synthetic triplet dataset.
    MakeSynthetic(MakeSyntheticArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Hd,
}

impl StageArg {
    fn name(self) -> &'static str {
        match self {
            StageArg::One => "1",
            StageArg::Two => "2",
            StageArg::Hd => "hd",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AugmentArg {
    /// No augmentation.
    Identity,
    /// Horizontal/vertical flips and temporal reversal only.
    Flips,
    /// Scale, rotation, crop, flips, and temporal reversal.
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Estimate flow at the input resolution.
    Original,
    /// Estimate flow at half resolution and lift the warp state.
    Downscaled,
}

impl ModeArg {
    fn mode(self) -> FlowMode {
        match self {
            ModeArg::Original => FlowMode::Original,
            ModeArg::Downscaled => FlowMode::Downscaled,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Dataset root (sequences/<seq>/<clip>/im{1,2,3}.png).
    #[arg(long)]
    data: PathBuf,
    /// Triplet list file (default: <data>/tri_list.txt).
    #[arg(long)]
    list: Option<PathBuf>,
    /// Training stage.
    #[arg(long)]
    stage: StageArg,
    /// Checkpoint to continue from (required for stages 2 and hd).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Step metrics file, one JSON record per step (default: <out>.metrics.jsonl).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Override the RNG seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Augmentation policy.
    #[arg(long, value_enum, default_value_t = AugmentArg::Flips)]
    augment: AugmentArg,
}

#[derive(Args)]
struct InterpolateArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// First input frame (PNG).
    first: PathBuf,
    /// Second input frame (PNG).
    second: PathBuf,
    /// Output path for the predicted frame.
    #[arg(long)]
    out: PathBuf,
    /// Estimate flow at half resolution (for HD or large-motion inputs).
    #[arg(long)]
    hd: bool,
    /// Ground-truth midpoint frame; prints PSNR/SSIM against it.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root (sequences/<seq>/<clip>/im{1,2,3}.png).
    #[arg(long)]
    data: PathBuf,
    /// Triplet list file (default: <data>/tri_list.txt).
    #[arg(long)]
    list: Option<PathBuf>,
    /// Flow estimation mode.
    #[arg(long, value_enum, default_value_t = ModeArg::Original)]
    mode: ModeArg,
    /// Results file, one JSON record per triplet plus a mean record.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Input resolution as WIDTHxHEIGHT.
    #[arg(long, default_value = "448x256")]
    res: String,
    /// Also print the four-row decoder-ablation table.
    #[arg(long)]
    sweep: bool,
    /// Write the machine-readable records to this file as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MakeSyntheticArgs {
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    /// Number of triplets.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Square frame size in pixels (multiple of 32).
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Motion mix: mixed, static, small, or large.
    #[arg(long, default_value = "mixed")]
    motion: String,
}

/// Entry point for the `midframe` binary; returns the process exit code.
pub fn cli_main() -> i32 {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Interpolate(a) => run_interpolate(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Cost(a) => run_cost(a),
        Command::MakeSynthetic(a) => run_make_synthetic(a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn init_logging() {
    let (level, bad) = match std::env::var(LOG_LEVEL_ENV) {
        Ok(v) => match v.as_str() {
            "debug" => (log::LevelFilter::Debug, None),
            "info" => (log::LevelFilter::Info, None),
            "warn" => (log::LevelFilter::Warn, None),
            _ => (log::LevelFilter::Info, Some(v)),
        },
        Err(_) => (log::LevelFilter::Info, None),
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
    if let Some(v) = bad {
        log::warn!("{LOG_LEVEL_ENV}={v} is not one of debug|info|warn; using info");
    }
}

/// A command failure, split by whose fault it is: `User` maps to exit code 1,
/// `Internal` to exit code 2.
#[derive(Debug)]
enum Failure {
    User(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::User(_) => 1,
            Failure::Internal(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::User(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::User(e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::User(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::User(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::User(e.to_string())
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        Failure::User(e.to_string())
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::NonFiniteLoss { .. } | TrainError::Metric(_) => Failure::Internal(e.to_string()),
        other => Failure::User(other.to_string()),
    }
}

fn io_user(what: &str, path: &Path, e: std::io::Error) -> Failure {
    Failure::User(format!("cannot {what} {}: {e}", path.display()))
}

fn read_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_user("read config", path, e))?;
    Ok(RunConfig::parse(&text)?)
}

fn list_path(root: &Path, list: Option<&Path>) -> PathBuf {
    list.map(Path::to_path_buf).unwrap_or_else(|| root.join("tri_list.txt"))
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    let ck = Checkpoint::load(path)?;
    Ok(Model::from_store(ck.config.model.clone(), ck.weights))
}

fn dims(x: &ArrayD<f32>) -> String {
    let s = x.shape();
    format!("{}x{}", s[s.len() - 1], s[s.len() - 2])
}

fn run_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = read_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.train.stage = match a.stage {
        StageArg::One => Stage::FlowOnly,
        StageArg::Two => Stage::Full,
        StageArg::Hd => Stage::HdFinetune,
    };
    let list = list_path(&a.data, a.list.as_deref());
    let data: Vec<Triplet> =
        load_vimeo_triplets(&a.data, &list)?.collect::<Result<_, DataError>>()?;
    let policy = match a.augment {
        AugmentArg::Identity => AugmentationPolicy::identity(),
        AugmentArg::Flips => AugmentationPolicy::flips_only(),
        AugmentArg::Full => AugmentationPolicy::training(cfg.train.crop_size),
    };
    let outcome = match a.stage {
        StageArg::One => {
            if a.init.is_some() {
                return Err(Failure::User(
                    "--stage 1 trains from scratch and does not accept --init".into(),
                ));
            }
            train_stage1(&data, &cfg, &policy)
        }
        StageArg::Two => {
            train_stage2(&data, &cfg, &policy, load_init(a.init.as_deref(), "2", "stage-1")?)
        }
        StageArg::Hd => {
            finetune_hd(&data, &cfg, &policy, load_init(a.init.as_deref(), "hd", "stage-2")?)
        }
    }
    .map_err(train_failure)?;

    let metrics_path = a
        .metrics
        .unwrap_or_else(|| PathBuf::from(format!("{}.metrics.jsonl", a.out.display())));
    let mut lines = String::new();
    for rec in &outcome.history {
        let row = serde_json::to_string(rec)
            .map_err(|e| Failure::Internal(format!("metrics serialization: {e}")))?;
        lines.push_str(&row);
        lines.push('\n');
    }
    fs::write(&metrics_path, lines).map_err(|e| io_user("write metrics file", &metrics_path, e))?;
    outcome.checkpoint.save(&a.out)?;
    if !outcome.dead_params.is_empty() {
        log::warn!(
            "{} parameters received no gradient in any epoch (first: {})",
            outcome.dead_params.len(),
            outcome.dead_params[0]
        );
    }
    println!(
        "stage {} done: {} steps, final loss {:.6}",
        a.stage.name(),
        outcome.checkpoint.step,
        outcome.history.last().map(|r| r.total).unwrap_or(f64::NAN)
    );
    println!("wrote checkpoint {}", a.out.display());
    println!("wrote metrics {}", metrics_path.display());
    Ok(())
}

fn load_init(path: Option<&Path>, stage: &str, wants: &str) -> Result<Checkpoint, Failure> {
    let path = path.ok_or_else(|| {
        Failure::User(format!("--stage {stage} requires --init with a {wants} checkpoint"))
    })?;
    Ok(Checkpoint::load(path)?)
}

fn run_interpolate(a: InterpolateArgs) -> Result<(), Failure> {
    let model = load_model(&a.checkpoint)?;
    let first = load_png(&a.first)?;
    let second = load_png(&a.second)?;
    if first.shape() != second.shape() {
        return Err(Failure::User(format!(
            "input sizes differ: {} is {}, {} is {}",
            a.first.display(),
            dims(&first),
            a.second.display(),
            dims(&second)
        )));
    }
    let gt = match &a.gt {
        Some(p) => {
            let g = load_png(p)?;
            if g.shape() != first.shape() {
                return Err(Failure::User(format!(
                    "ground truth {} is {} but the inputs are {}",
                    p.display(),
                    dims(&g),
                    dims(&first)
                )));
            }
            Some(g)
        }
        None => None,
    };
    let mode = if a.hd { FlowMode::Downscaled } else { FlowMode::Original };
    let out = model.interpolate(&first, &second, mode)?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    match mode {
        FlowMode::Original => log::info!("flow estimated at full resolution ({w}x{h})"),
        FlowMode::Downscaled => {
            println!("flow estimated at {}x{}, lifted to {w}x{h}", w / 2, h / 2)
        }
    }
    save_png(&a.out, &out.frame.view())?;
    println!("wrote {}", a.out.display());
    if let Some(gt) = gt {
        let p = psnr(&out.frame, &gt)?;
        let s = ssim(&out.frame, &gt)?;
        println!("PSNR {p:.4} dB, SSIM {s:.6}");
    }
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let model = load_model(&a.checkpoint)?;
    let list = list_path(&a.data, a.list.as_deref());
    let loader = load_vimeo_triplets(&a.data, &list)?;
    if loader.len() == 0 {
        return Err(Failure::User(format!(
            "dataset list {} contains no triplets",
            list.display()
        )));
    }
    let mode = a.mode.mode();
    let mut records: Vec<String> = Vec::new();
    let mut evaluated = 0usize;
    let mut failed = 0usize;
    let (mut sum_psnr, mut sum_ssim) = (0.0f64, 0.0f64);
    println!("{:<28} {:>10} {:>10}", "triplet", "psnr_db", "ssim");
    for item in loader {
        match eval_one(&model, item, mode) {
            Ok(row) => {
                println!("{:<28} {:>10.4} {:>10.6}", row.source_id, row.psnr, row.ssim);
                sum_psnr += row.psnr;
                sum_ssim += row.ssim;
                evaluated += 1;
                records.push(
                    serde_json::to_string(&row)
                        .map_err(|e| Failure::Internal(format!("row serialization: {e}")))?,
                );
            }
            Err((id, msg)) => {
                let id = id.unwrap_or_else(|| "?".into());
                println!("{id:<28} failed: {msg}");
                log::warn!("{id}: {msg}");
                failed += 1;
                records.push(json!({ "source_id": id, "error": msg }).to_string());
            }
        }
    }
    if evaluated > 0 {
        let mean_psnr = sum_psnr / evaluated as f64;
        let mean_ssim = sum_ssim / evaluated as f64;
        println!("{:<28} {:>10.4} {:>10.6}", "mean", mean_psnr, mean_ssim);
        records.push(
            json!({
                "mean_psnr": mean_psnr,
                "mean_ssim": mean_ssim,
                "evaluated": evaluated,
                "failed": failed,
            })
            .to_string(),
        );
    }
    let body = records.join("\n") + "\n";
    fs::write(&a.out, body).map_err(|e| io_user("write results file", &a.out, e))?;
    println!("wrote results {}", a.out.display());
    if evaluated == 0 {
        return Err(Failure::Internal(format!("all {failed} triplets failed")));
    }
    Ok(())
}

fn eval_one(
    model: &Model,
    item: Result<Triplet, DataError>,
    mode: FlowMode,
) -> Result<EvalRow, (Option<String>, String)> {
    let t = item.map_err(|e| (None, e.to_string()))?;
    let fail = |e: String| (Some(t.source_id.clone()), e);
    let out = model.interpolate(&t.first, &t.last, mode).map_err(|e| fail(e.to_string()))?;
    let p = psnr(&out.frame, &t.middle).map_err(|e| fail(e.to_string()))?;
    let s = ssim(&out.frame, &t.middle).map_err(|e| fail(e.to_string()))?;
    Ok(EvalRow { source_id: t.source_id, psnr: p, ssim: s })
}

fn run_cost(a: CostArgs) -> Result<(), Failure> {
    let cfg = read_config(&a.config)?;
    let (w, h) = parse_res(&a.res)?;
    let report = cost_report(&cfg.model, &ArchVariant::default(), h, w);
    println!("cost at {w}x{h} (one multiply-accumulate = 2 FLOPs)");
    println!("{:<12} {:>14} {:>18}", "section", "params", "flops");
    for s in &report.sections {
        println!("{:<12} {:>14} {:>18}", s.section, grouped(s.params), grouped(s.flops));
    }
    println!("{:<12} {:>14} {:>18}", "total", grouped(report.params), grouped(report.flops));
    println!(
        "total {:.3} M params, {:.2} GFLOPs per frame",
        report.params as f64 / 1e6,
        report.flops as f64 / 1e9
    );
    let mut records = vec![serde_json::to_string(&report)
        .map_err(|e| Failure::Internal(format!("record serialization: {e}")))?];
    if a.sweep {
        println!();
        println!("decoder ablation at {w}x{h}:");
        println!("{:<12} {:>14} {:>18}", "decoder", "params", "flops");
        let rows: [(&str, [usize; 3], DecoderKind); 4] = [
            ("ds-5/5/5", [5, 5, 5], DecoderKind::DwSeparable),
            ("ds-7/7/7", [7, 7, 7], DecoderKind::DwSeparable),
            ("ds-7/15/15", [7, 15, 15], DecoderKind::DwSeparable),
            ("conv-3/3/3", [3, 3, 3], DecoderKind::NormalConv),
        ];
        for (name, kernels, decoder) in rows {
            let mut m = cfg.model.clone();
            m.highres_kernels = kernels;
            let variant = ArchVariant { decoder, ..ArchVariant::default() };
            let r = cost_report(&m, &variant, h, w);
            println!("{:<12} {:>14} {:>18}", name, grouped(r.params), grouped(r.flops));
            records.push(
                json!({
                    "variant": name,
                    "params": r.params,
                    "flops": r.flops,
                    "height": h,
                    "width": w,
                })
                .to_string(),
            );
        }
    }
    for r in &records {
        println!("{r}");
    }
    if let Some(out) = &a.out {
        fs::write(out, records.join("\n") + "\n")
            .map_err(|e| io_user("write record file", out, e))?;
        println!("wrote record {}", out.display());
    }
    Ok(())
}

fn run_make_synthetic(a: MakeSyntheticArgs) -> Result<(), Failure> {
    let spec = MotionSpec::from_str(&a.motion).map_err(Failure::User)?;
    if a.count == 0 {
        return Err(Failure::User("--count must be at least 1".into()));
    }
    let triplets = generate_synthetic_triplets(a.count, a.size, &spec, a.seed)?;
    let list = write_vimeo_layout(&a.out, &triplets)?;
    println!(
        "wrote {} triplets under {} (list {})",
        triplets.len(),
        a.out.display(),
        list.display()
    );
    Ok(())
}

fn parse_res(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::User(format!("--res expects WIDTHxHEIGHT (e.g. 448x256), got `{s}`"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    let w: usize = w.parse().map_err(|_| bad())?;
    let h: usize = h.parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

fn grouped(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}
