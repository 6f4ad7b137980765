//! `dinv`: train teachers, synthesize images from them and use the images
//! for distillation, pruning and class-incremental learning.

mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use dinv_core::inversion::{Multires, SynthMode};

use crate::config::RunConfig;
use crate::error::{usage, CliError};

#[derive(Parser, Debug)]
#[command(name = "dinv", version, about = "Data-free image synthesis and model compression")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Run seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "DINV_OUT", default_value = "runs")]
    out: PathBuf,
    /// Threads for independent synthesis batches.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// TOML file with `[data]`, `[train]`, `[synthesis]`, `[distill]`, `[prune]`, `[continual]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `shapes`, `mnist:DIR` or `cifar10:DIR`.
    #[arg(long, global = true)]
    data: Option<String>,
    /// Side length of generated shapes images.
    #[arg(long, global = true)]
    image_size: Option<usize>,
    /// Generated shapes training images per class.
    #[arg(long, global = true)]
    per_class: Option<usize>,
    /// Generated shapes test images per class.
    #[arg(long, global = true)]
    test_per_class: Option<usize>,
    /// Number of shapes classes.
    #[arg(long, global = true)]
    classes: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a classifier with cross-entropy on the selected dataset.
    TrainTeacher(TrainArgs),
    /// Synthesize images from a trained teacher.
    Invert(InvertArgs),
    /// Distill a teacher into a student from synthesized, real or on-the-fly images.
    Distill(DistillArgs),
    /// Latency-aware filter pruning with distillation finetuning.
    Prune(PruneArgs),
    /// Extend a model with the remaining dataset classes.
    Continual(ContinualArgs),
    /// Tabulate synthetic per-conv latencies for a model.
    BuildLut(BuildLutArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Noise,
    Deepdream,
    Di,
    Adi,
}

impl From<ModeArg> for SynthMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Noise => SynthMode::NoiseOnly,
            ModeArg::Deepdream => SynthMode::Deepdream,
            ModeArg::Di => SynthMode::Deepinversion,
            ModeArg::Adi => SynthMode::Adaptive,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReplayArg {
    None,
    Di,
    Real,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// e.g. `vgg_small:16-32-64`, `resnet_small:16x2x1`, `mlp_bn:64x2`.
    #[arg(long)]
    pub arch: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Train on classes `0..K` only.
    #[arg(long, value_name = "K")]
    pub first_classes: Option<usize>,
}

/// Synthesis knobs shared by the commands that synthesize.
#[derive(Args, Debug, Default)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Optimization steps per batch; 0 keeps the initial noise.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub alpha_tv: Option<f64>,
    #[arg(long)]
    pub alpha_l2: Option<f64>,
    #[arg(long)]
    pub alpha_f: Option<f64>,
    #[arg(long)]
    pub alpha_c: Option<f64>,
    /// Maximum random shift in pixels.
    #[arg(long)]
    pub jitter: Option<usize>,
    #[arg(long)]
    pub no_flip: bool,
    /// Do not clamp pixels to the valid image range.
    #[arg(long)]
    pub no_clip: bool,
    /// Coarse-to-fine schedule `LOW_RES:LOW_ITERS:HIGH_ITERS`.
    #[arg(long, value_parser = parse_multires)]
    pub multires: Option<Multires>,
}

#[derive(Args, Debug)]
pub struct InvertArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    /// Required for `--mode adi`.
    #[arg(long)]
    pub student: Option<PathBuf>,
    /// Images per synthesized batch.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Number of batches; batch `b` uses seed `seed + b`.
    #[arg(long, default_value_t = 1)]
    pub batches: usize,
    /// Adam step size on the pixels.
    #[arg(long)]
    pub lr: Option<f64>,
    #[command(flatten)]
    pub syn: SynthArgs,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["images", "real", "adaptive"])))]
#[command(group(ArgGroup::new("init").required(true).args(["student", "student_arch"])))]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    /// Start from this checkpoint.
    #[arg(long)]
    pub student: Option<PathBuf>,
    /// Start from a fresh model of this architecture.
    #[arg(long)]
    pub student_arch: Option<String>,
    /// `images.dinv` written by `invert`.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Distill on the training images.
    #[arg(long)]
    pub real: bool,
    /// Synthesize a new batch every `--cadence` steps while training.
    #[arg(long)]
    pub adaptive: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Steps per epoch with `--adaptive`.
    #[arg(long)]
    pub iters_per_epoch: Option<usize>,
    #[arg(long)]
    pub cadence: Option<usize>,
    #[arg(long)]
    pub syn_batch: Option<usize>,
    #[arg(long)]
    pub syn_lr: Option<f64>,
    #[command(flatten)]
    pub syn: SynthArgs,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["images", "real"])))]
#[command(group(ArgGroup::new("goal").args(["target_filters", "target_latency_ms"])))]
pub struct PruneArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub real: bool,
    /// Fraction of prunable filters to remove.
    #[arg(long)]
    pub target_filters: Option<f64>,
    /// Estimated latency to reach.
    #[arg(long)]
    pub target_latency_ms: Option<f64>,
    /// Weight of the latency reduction in the ranking.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Latency table from `build-lut`; built from the cost model when absent.
    #[arg(long)]
    pub lut: Option<PathBuf>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps_between: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub filters_per_step: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ContinualArgs {
    /// Model trained on the first classes of the dataset.
    #[arg(long)]
    pub old: PathBuf,
    #[arg(long, value_enum, default_value_t = ReplayArg::Di, conflicts_with = "no_replay")]
    pub replay: ReplayArg,
    /// Same as `--replay none`.
    #[arg(long)]
    pub no_replay: bool,
    /// Number of replay images.
    #[arg(long, default_value_t = 350)]
    pub replay_count: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub syn_batch: Option<usize>,
    #[arg(long)]
    pub syn_lr: Option<f64>,
    #[command(flatten)]
    pub syn: SynthArgs,
}

#[derive(Args, Debug)]
pub struct BuildLutArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub per_mac_ms: Option<f64>,
    #[arg(long)]
    pub overhead_ms: Option<f64>,
}

fn parse_multires(s: &str) -> Result<Multires, String> {
    let parts: Vec<usize> = s
        .split(':')
        .map(|p| p.parse().map_err(|_| format!("`{p}` is not a number")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [low_res, low_iters, high_iters] => Ok(Multires { low_res, low_iters, high_iters }),
        _ => Err("expected LOW_RES:LOW_ITERS:HIGH_ITERS".into()),
    }
}

fn resolve(global: &GlobalArgs) -> Result<RunConfig, CliError> {
    if global.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    let mut cfg = RunConfig::load(global.config.as_deref())?;
    let d = &mut cfg.data;
    if let Some(v) = &global.data {
        d.source = v.clone();
    }
    set(&mut d.image_size, global.image_size);
    set(&mut d.per_class, global.per_class);
    set(&mut d.test_per_class, global.test_per_class);
    set(&mut d.classes, global.classes);
    cfg.apply_seed(global.seed);
    Ok(cfg)
}

pub fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli.global)?;
    let ctx = commands::Context::new(cfg, &cli.global.out, cli.global.workers);
    match cli.command {
        Command::TrainTeacher(a) => commands::train_teacher(ctx, a),
        Command::Invert(a) => commands::invert(ctx, a),
        Command::Distill(a) => commands::distill(ctx, a),
        Command::Prune(a) => commands::prune(ctx, a),
        Command::Continual(a) => commands::continual(ctx, a),
        Command::BuildLut(a) => commands::build_lut(ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
