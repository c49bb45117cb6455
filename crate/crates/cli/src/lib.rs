//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.
//! `GIFNET_THREADS` caps the number of worker threads.

pub mod config;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gifnet::datasetgen::{build_dataset, BuildConfig, DatasetManifest, MaskKind, DEFAULT_SIGMA};
use gifnet::fusion::{enhance_single, fuse_pair, ColorSource, FusionRequest};
use gifnet::imageio::{load_image, save_image};
use gifnet::metrics::evaluate_dir;
use gifnet::network::load_checkpoint;
use gifnet::trainer::train_loop;

use crate::config::RunConfig;

pub const THREADS_ENV: &str = "GIFNET_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "gifnet",
    version,
    about = "Task-agnostic image fusion: augment, train, fuse, enhance, evaluate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Build a joint dataset with synthetic near/far-focus pairs from aligned visible/infrared images.
    Augment(AugmentArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Fuse two aligned images.
    Fuse(FuseArgs),
    /// Enhance a single image by fusing it with itself.
    Enhance(EnhanceArgs),
    /// Score fused images against their sources.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Directory of visible (RGB or grayscale) images.
    #[arg(long)]
    pub vis: PathBuf,
    /// Directory of infrared images with the same file stems.
    #[arg(long)]
    pub ir: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Gaussian blur sigma for the out-of-focus regions.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f32,
    /// Focus mask: left-half, top-half or centered-disk.
    #[arg(long, default_value = "centered-disk")]
    pub mask: String,
    /// Seed for randomized masks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest written by `augment`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Final checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// key = value configuration file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Step log path (default: the checkpoint path with a `.log` extension).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Directory for periodic checkpoints (default: next to --out).
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Number of optimization steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Samples per step.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Square crop side; a multiple of the attention window.
    #[arg(long)]
    pub crop: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seed for initialization and crops.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Task alternation: per-step or per-epoch.
    #[arg(long)]
    pub alternation: Option<String>,
    /// Save a checkpoint every N steps (0 disables).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Task mix: alternating, mm-only or dp-only.
    #[arg(long)]
    pub tasks: Option<String>,
    /// Saliency backend: spatial-grad or classifier-grad.
    #[arg(long)]
    pub saliency: Option<String>,
    /// Mixing-weight temperature: mean-normalized or raw.
    #[arg(long)]
    pub temperature: Option<String>,
    /// Disable the reconstruction branch and public loss.
    #[arg(long)]
    pub no_rec: bool,
    /// Disable cross-branch interaction (all gates held at 0).
    #[arg(long)]
    pub no_cfgm: bool,
    /// Extra configuration entries, `KEY=VALUE`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Checkpoint to load.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// First input; donates chroma by default.
    #[arg(long)]
    pub a: PathBuf,
    /// Second input.
    #[arg(long)]
    pub b: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Chroma donor: a, b or none.
    #[arg(long, default_value = "a")]
    pub color: String,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    /// Checkpoint to load.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input image.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of fused images.
    #[arg(long)]
    pub fused: PathBuf,
    /// Directory of first sources, matched by file stem.
    #[arg(long)]
    pub a: PathBuf,
    /// Directory of second sources, matched by file stem.
    #[arg(long)]
    pub b: PathBuf,
    /// Report TSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<gifnet::Error> for CliError {
    fn from(e: gifnet::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match apply_thread_cap().and_then(|_| execute(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            e.exit_code()
        }
    }
}

fn apply_thread_cap() -> Result<(), CliError> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => std::env::set_var("RAYON_NUM_THREADS", n.to_string()),
            _ => {
                return Err(usage(format!(
                    "{THREADS_ENV} must be a positive integer, got `{v}`"
                )))
            }
        }
    }
    Ok(())
}

pub fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Augment(a) => cmd_augment(a),
        Command::Train(a) => cmd_train(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn cmd_augment(args: AugmentArgs) -> Result<(), CliError> {
    let mask: MaskKind = args.mask.parse().map_err(usage)?;
    if args.sigma.is_nan() || args.sigma <= 0.0 {
        return Err(usage(format!(
            "--sigma must be positive, got {}",
            args.sigma
        )));
    }
    let cfg = BuildConfig {
        seed: args.seed,
        sigma: args.sigma,
        mask,
    };
    let manifest = build_dataset(&args.vis, &args.ir, &args.out, &cfg)?;
    println!(
        "{}",
        manifest
            .root
            .join(gifnet::datasetgen::MANIFEST_FILE)
            .display()
    );
    Ok(())
}

/// Merges the config file, dedicated flags and `--set` entries, in that order.
pub fn resolve_train_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    let mut set = |k: &str, v: String| cfg.set(k, &v).map_err(usage);
    if let Some(v) = &args.data {
        set("data", v.display().to_string())?;
    }
    if let Some(v) = &args.out {
        set("out", v.display().to_string())?;
    }
    if let Some(v) = &args.log {
        set("log", v.display().to_string())?;
    }
    if let Some(v) = &args.checkpoint_dir {
        set("checkpoint_dir", v.display().to_string())?;
    }
    let numeric = [
        ("steps", args.steps.map(|v| v.to_string())),
        ("batch", args.batch.map(|v| v.to_string())),
        ("crop", args.crop.map(|v| v.to_string())),
        ("lr", args.lr.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        (
            "checkpoint_every",
            args.checkpoint_every.map(|v| v.to_string()),
        ),
        ("alternation", args.alternation.clone()),
        ("tasks", args.tasks.clone()),
        ("saliency", args.saliency.clone()),
        ("temperature", args.temperature.clone()),
    ];
    for (k, v) in numeric {
        if let Some(v) = v {
            set(k, v)?;
        }
    }
    if args.no_rec {
        set("use_rec", "false".into())?;
    }
    if args.no_cfgm {
        set("use_cfgm", "false".into())?;
    }
    for entry in &args.set {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{entry}`")))?;
        set(k.trim(), v.trim().to_string())?;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(&args)?;
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| usage("--data is required"))?;
    let out = cfg.out.clone().ok_or_else(|| usage("--out is required"))?;
    let log_path = cfg.log.clone().unwrap_or_else(|| out.with_extension("log"));
    let ckpt_dir = cfg
        .checkpoint_dir
        .clone()
        .unwrap_or_else(|| out.parent().map(Path::to_path_buf).unwrap_or_default());

    let manifest = DatasetManifest::load(&data)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    if cfg.train.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir)
            .with_context(|| format!("creating {}", ckpt_dir.display()))?;
    }
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let mut log_err: Option<std::io::Error> = None;
    let run = train_loop(
        &manifest,
        &cfg.arch,
        &cfg.train,
        (cfg.train.checkpoint_every > 0).then_some(ckpt_dir.as_path()),
        |r| {
            if log_err.is_none() {
                if let Err(e) = writeln!(log, "{}", r.to_line()) {
                    log_err = Some(e);
                }
            }
        },
    )?;
    if let Some(e) = log_err {
        return Err(anyhow::Error::from(e)
            .context(format!("writing {}", log_path.display()))
            .into());
    }
    log.flush()
        .with_context(|| format!("writing {}", log_path.display()))?;
    gifnet::network::save_checkpoint(&run.params, &out)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_fuse(args: FuseArgs) -> Result<(), CliError> {
    let color: ColorSource = args.color.parse().map_err(usage)?;
    let a = load_image(&args.a)?;
    let b = load_image(&args.b)?;
    if a.dims() != b.dims() {
        return Err(usage(format!(
            "inputs differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let params = load_checkpoint(&args.ckpt)?;
    let req = FusionRequest {
        input_a: a,
        input_b: b,
        color_source: color,
    };
    let fused = fuse_pair(&params, &req)?;
    save_image(&fused, &args.out)?;
    Ok(())
}

fn cmd_enhance(args: EnhanceArgs) -> Result<(), CliError> {
    let x = load_image(&args.input)?;
    let params = load_checkpoint(&args.ckpt)?;
    save_image(&enhance_single(&params, &x)?, &args.out)?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let report = evaluate_dir(&args.fused, &args.a, &args.b)?;
    report.write(&args.out)?;
    println!("{}", args.out.display());
    Ok(())
}
