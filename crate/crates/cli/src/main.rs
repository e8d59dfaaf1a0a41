//! `svio`: generate synthetic datasets, train odometry models, evaluate
//! them and inspect their fusion masks.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use svio_autodiff::AutodiffError;
use svio_core::eval::{analyze_masks, compare, evaluate};
use svio_core::kv::KvMap;
use svio_core::odometry::integrate_trajectory;
use svio_core::seed;
use svio_core::sim::{generate_dataset, read_dataset, write_dataset, Dataset};
use svio_core::train::{load_checkpoint, train, write_training_outputs, Checkpoint};
use svio_core::{Result, SvioError};

use config::RunConfig;

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "svio", version, about = "Selective visual-inertial odometry on synthetic data")]
struct Cli {
    /// Configuration file of `key = value` lines, optionally under `[section]` headers.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train.svio, eval.svio, eval_truth.csv and config.txt.
    Generate(GenerateArgs),
    /// Train a model; writes final.ckpt, best.ckpt, loss.csv and config.txt.
    Train(TrainArgs),
    /// Per-sequence and aggregate pose errors; writes eval.csv and config.txt.
    Evaluate(EvalArgs),
    /// Mask usage statistics; writes masks.csv, mask_summary.csv and config.txt.
    Analyze(AnalyzeArgs),
    /// Error grid of models × datasets; writes compare.csv and config.txt.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Degradation preset of the training split.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    eval_preset: Option<String>,
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long)]
    eval_windows: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// driving | aerial
    #[arg(long)]
    regime: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// vision-only | direct | soft | hard
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Seed of the hard-fusion evaluation gates.
    #[arg(long)]
    eval_seed: Option<u64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Motion quantile bins.
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    eval_seed: Option<u64>,
}

#[derive(Args)]
struct CompareArgs {
    /// NAME=PATH of a checkpoint; repeatable, one grid row each.
    #[arg(long = "model", required = true, value_name = "NAME=PATH")]
    models: Vec<String>,
    /// NAME=PATH of a dataset; repeatable, one grid column each.
    #[arg(long = "data", required = true, value_name = "NAME=PATH")]
    datasets: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    eval_seed: Option<u64>,
}

fn exit_code(e: &SvioError) -> u8 {
    match e {
        SvioError::Parameter(_)
        | SvioError::Contract(_)
        | SvioError::Dimension(_)
        | SvioError::ParamMismatch(_)
        | SvioError::UnsupportedMode(_) => EXIT_CONFIG,
        SvioError::Io(_)
        | SvioError::Csv(_)
        | SvioError::Format { .. }
        | SvioError::Version { .. }
        | SvioError::Checksum { .. } => EXIT_IO,
        SvioError::Numerical { .. } | SvioError::Autodiff(AutodiffError::Domain { .. }) => EXIT_NUMERICAL,
        SvioError::Autodiff(_) => EXIT_INTERNAL,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn set(flags: &mut KvMap, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        flags.set(key, v.to_string());
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut flags = KvMap::new();
    for pair in &cli.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| SvioError::Parameter(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        flags.set(k.trim(), v.trim());
    }
    match &cli.command {
        Command::Generate(a) => {
            set(&mut flags, "data.preset", a.preset.as_ref());
            set(&mut flags, "data.eval_preset", a.eval_preset.as_ref());
            set(&mut flags, "data.windows", a.windows);
            set(&mut flags, "data.eval_windows", a.eval_windows);
            set(&mut flags, "data.seed", a.seed);
            set(&mut flags, "sim.regime", a.regime.as_ref());
        }
        Command::Train(a) => {
            set(&mut flags, "model.fusion", a.fusion.as_ref());
            set(&mut flags, "train.epochs", a.epochs);
            set(&mut flags, "train.batch_size", a.batch_size);
            set(&mut flags, "train.learning_rate", a.lr);
            set(&mut flags, "train.seq_len", a.seq_len);
            set(&mut flags, "train.seed", a.seed);
        }
        Command::Evaluate(a) => {
            set(&mut flags, "eval.seq_len", a.seq_len);
            set(&mut flags, "eval.seed", a.eval_seed);
        }
        Command::Analyze(a) => {
            set(&mut flags, "eval.bins", a.bins);
            set(&mut flags, "eval.seed", a.eval_seed);
        }
        Command::Compare(a) => set(&mut flags, "eval.seed", a.eval_seed),
    }
    let cfg = RunConfig::load(cli.config.as_deref(), std::env::vars(), &flags)?;
    match cli.command {
        Command::Generate(a) => cmd_generate(&cfg, &a.out),
        Command::Train(a) => cmd_train(&cfg, &a.data, &a.out),
        Command::Evaluate(a) => cmd_evaluate(&cfg, &a.checkpoint, &a.data, &a.out),
        Command::Analyze(a) => cmd_analyze(&cfg, &a.checkpoint, &a.data, &a.out),
        Command::Compare(a) => cmd_compare(&cfg, &a.models, &a.datasets, &a.out),
    }
}

fn write_echo(dir: &Path, kv: &KvMap) -> Result<()> {
    fs::write(dir.join("config.txt"), kv.to_text())?;
    Ok(())
}

fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let s = cfg.data.seed;
    let splits = [
        ("train", &cfg.data.preset, cfg.data.windows),
        ("eval", &cfg.data.eval_preset, cfg.data.eval_windows),
    ];
    for (split, preset, n) in splits {
        let spec = cfg.degradation(preset, seed::derive(s, &format!("degradation-{split}")))?;
        let mut ds = generate_dataset(&cfg.sim, n, seed::derive(s, &format!("data-{split}")), &spec)?;
        ds.config.set("data.preset", preset);
        write_dataset(&out.join(format!("{split}.svio")), &ds)?;
        eprintln!("{split}: {} windows, preset {preset}", ds.windows.len());
        if split == "eval" {
            write_truth(&ds, &out.join("eval_truth.csv"))?;
        }
    }
    write_echo(out, &cfg.echo())
}

/// Ground-truth poses of the first trajectory of `ds`.
fn write_truth(ds: &Dataset, path: &Path) -> Result<()> {
    let range = ds.trajectories().into_iter().next().unwrap_or(0..0);
    let deltas: Vec<_> = ds.windows[range].iter().map(|w| w.truth).collect();
    integrate_trajectory(&deltas)?.write_csv(fs::File::create(path)?)
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = read_dataset(data)?;
    let mut tc = cfg.train.clone();
    if !cfg.explicit.contains("train.train_preset") {
        if let Some(p) = ds.config.get_str("data.preset") {
            tc.train_preset = p.to_string();
        }
    }
    let outcome = train(&tc, &ds)?;
    write_training_outputs(out, &tc, &outcome)?;
    for e in &outcome.curve {
        eprintln!("epoch {:>3}  loss {:.6}", e.epoch, e.loss);
    }
    let mut echo = cfg.echo();
    tc.write_kv(&mut echo);
    write_echo(out, &echo)
}

fn load_pair(checkpoint: &Path, data: &Path) -> Result<(Checkpoint, Dataset)> {
    Ok((load_checkpoint(checkpoint)?, read_dataset(data)?))
}

fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let (ckpt, ds) = load_pair(checkpoint, data)?;
    let opts = cfg.eval_options(&ckpt)?;
    let report = evaluate(&ckpt, &ds, &opts)?;
    fs::create_dir_all(out)?;
    report.write_csv(fs::File::create(out.join("eval.csv"))?)?;
    eprintln!(
        "translation {:.6} m  rotation {:.6} deg",
        report.translation, report.rotation_deg
    );
    write_echo(out, &cfg.echo())
}

fn cmd_analyze(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let (ckpt, ds) = load_pair(checkpoint, data)?;
    let opts = cfg.eval_options(&ckpt)?;
    let report = analyze_masks(&ckpt, &ds, &opts, cfg.eval.bins)?;
    fs::create_dir_all(out)?;
    report.write_csv(fs::File::create(out.join("masks.csv"))?)?;
    report.write_summary_csv(fs::File::create(out.join("mask_summary.csv"))?)?;
    write_echo(out, &cfg.echo())
}

fn named(pair: &str) -> Result<(String, PathBuf)> {
    pair.split_once('=')
        .map(|(n, p)| (n.to_string(), PathBuf::from(p)))
        .ok_or_else(|| SvioError::Parameter(format!("expected NAME=PATH, got `{pair}`")))
}

fn cmd_compare(cfg: &RunConfig, models: &[String], datasets: &[String], out: &Path) -> Result<()> {
    let models = models
        .iter()
        .map(|m| named(m).and_then(|(n, p)| Ok((n, load_checkpoint(&p)?))))
        .collect::<Result<Vec<_>>>()?;
    let datasets = datasets
        .iter()
        .map(|d| named(d).and_then(|(n, p)| Ok((n, read_dataset(&p)?))))
        .collect::<Result<Vec<_>>>()?;
    // Sequence length and gate seed come from the first model unless overridden.
    let opts = cfg.eval_options(&models[0].1)?;
    let grid = compare(&models, &datasets, &opts)?;
    fs::create_dir_all(out)?;
    grid.write_csv(fs::File::create(out.join("compare.csv"))?)?;
    write_echo(out, &cfg.echo())
}
