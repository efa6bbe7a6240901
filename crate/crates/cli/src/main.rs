//! `frat`: train, attack and inspect small CNNs with frequency-regularized
//! adversarial training.

mod commands;
mod config;
mod inputs;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "frat",
    version,
    about = "Frequency-regularized adversarial training on a small CNN",
    after_help = "Every subcommand accepts --config FILE with `key = value` lines; keys are \
                  the long flag names. Command-line flags override the file. The output \
                  directory defaults to $FR_OUT_DIR, or ./frat-out when that is unset."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write metrics.csv, final.ckpt and swa.ckpt
    Train(TrainArgs),
    /// Accuracy and mean loss of a checkpoint on the test set, optionally under attack
    Eval(EvalArgs),
    /// Clean and robust accuracy with low-pass filtered test inputs (sweep.csv)
    LpfSweep(SweepArgs),
    /// Spectra of adversarial perturbations as PGM maps plus spectra.csv
    Spectra(SpectraArgs),
    /// Total variation of the convolution kernels (smoothness.csv, conv1.pgm)
    Kernels(KernelArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Config file of `key = value` lines [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for initialization, shuffling and attack random starts
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; results do not depend on it
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Output directory [default: $FR_OUT_DIR or frat-out]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Use the built-in synthetic two-tone dataset instead of CIFAR-10
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub synth: bool,
    /// Directory with the CIFAR-10 binary batches, required unless --synth [default: none]
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Training-pool images per class (split into train and validation)
    #[arg(long, default_value_t = 500)]
    pub train_per_class: usize,
    /// Test images per class
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
    /// Share of the training pool used for training; the rest validates
    #[arg(long, default_value_t = 0.9)]
    pub split: f64,
    /// Seed for subset selection, splitting and synthetic generation
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct AttackArgs {
    /// Attack applied before classification
    #[arg(long, value_enum, default_value_t = AttackKind::Pgd)]
    pub attack: AttackKind,
    /// Attack iterations (ignored by fgsm and none)
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// L∞ radius in pixel units; fractions such as 8/255 are accepted
    #[arg(long, default_value = "8/255", value_parser = parse_fraction)]
    pub eps: f64,
    /// Step size; fractions accepted
    #[arg(long, default_value = "2/255", value_parser = parse_fraction)]
    pub alpha: f64,
    /// Start from a uniform point in the ε-ball
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub random_start: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    None,
    Fgsm,
    Pgd,
    Cw,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrTargetArg {
    Logits,
    Probabilities,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Training epochs
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Images per SGD step
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Initial learning rate; divided by 10 at 75 % and 90 % of the epochs
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// SGD momentum
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// L2 weight decay
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    /// Weight of the frequency regularizer; 0 is plain adversarial training
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Outputs compared by the frequency regularizer
    #[arg(long, value_enum, default_value_t = FrTargetArg::Logits)]
    pub fr_target: FrTargetArg,
    /// Train on PGD examples; false trains on clean images
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub adversarial: bool,
    /// PGD steps of the training attack
    #[arg(long, default_value_t = 10)]
    pub train_steps: usize,
    /// PGD steps of the per-epoch robust validation
    #[arg(long, default_value_t = 20)]
    pub eval_steps: usize,
    /// Attack radius for training and validation; fractions accepted
    #[arg(long, default_value = "8/255", value_parser = parse_fraction)]
    pub eps: f64,
    /// Attack step size; fractions accepted
    #[arg(long, default_value = "2/255", value_parser = parse_fraction)]
    pub alpha: f64,
    /// Keep a stochastic weight average from the first learning-rate drop
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub swa: bool,
    /// Random horizontal flips of training images
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub flip: bool,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub attack: AttackArgs,
    /// Checkpoint file [default: none]
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Also append the result as a row to this CSV file [default: none]
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub attack: AttackArgs,
    /// Checkpoint file [default: none]
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Filter bandwidths, strictly decreasing
    #[arg(long, value_delimiter = ',', default_value = "32,24,16,8")]
    pub bands: Vec<usize>,
    /// Attack through the filter instead of filtering a plain adversarial example
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub adaptive: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SpectraArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub attack: AttackArgs,
    /// Checkpoint file [default: none]
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Number of test images, evenly spaced through the test set
    #[arg(long, default_value_t = 100)]
    pub count: usize,
}

#[derive(Args, Debug, Clone)]
pub struct KernelArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint file [default: none]
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

/// Accepts `a/b` as well as plain decimals.
pub fn parse_fraction(s: &str) -> std::result::Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad numerator in `{s}`"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad denominator in `{s}`"))?;
            if b == 0.0 {
                return Err(format!("zero denominator in `{s}`"));
            }
            a / b
        }
        None => s.trim().parse().map_err(|_| format!("not a number: `{s}`"))?,
    };
    if !v.is_finite() || v < 0.0 {
        return Err(format!("expected a finite non-negative value, got `{s}`"));
    }
    Ok(v)
}

fn command() -> clap::Command {
    // A flag given twice keeps its last value, so config entries placed
    // before the user's arguments lose to them.
    Cli::command()
        .args_override_self(true)
        .mut_subcommands(|s| s.args_override_self(true))
}

/// Parses `argv`, splicing in the entries of `--config` when one is given.
fn parse(argv: Vec<OsString>) -> Result<Cli> {
    let matches = command().try_get_matches_from(&argv).map_err(ClapExit)?;
    let first = Cli::from_arg_matches(&matches).map_err(ClapExit)?;
    let config = match &first.command {
        Command::Train(a) => &a.run.config,
        Command::Eval(a) => &a.run.config,
        Command::LpfSweep(a) => &a.run.config,
        Command::Spectra(a) => &a.run.config,
        Command::Kernels(a) => &a.run.config,
    };
    let Some(path) = config.clone() else {
        return Ok(first);
    };
    let (name, _) = matches
        .subcommand()
        .ok_or_else(|| anyhow!("missing subcommand"))?;
    let sub = command()
        .find_subcommand(name)
        .cloned()
        .ok_or_else(|| anyhow!("unknown subcommand {name}"))?;
    let extra = config::load(&path, &sub)?;
    let at = argv
        .iter()
        .position(|a| a.to_str() == Some(name))
        .ok_or_else(|| anyhow!("subcommand {name} not found in arguments"))?;
    let mut spliced: Vec<OsString> = argv[..=at].to_vec();
    spliced.extend(extra.into_iter().map(OsString::from));
    spliced.extend_from_slice(&argv[at + 1..]);
    let matches = command().try_get_matches_from(&spliced).map_err(ClapExit)?;
    Ok(Cli::from_arg_matches(&matches).map_err(ClapExit)?)
}

/// Carries a clap error so `--help` and usage errors keep clap's own output.
#[derive(Debug)]
struct ClapExit(clap::Error);

impl std::fmt::Display for ClapExit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for ClapExit {}

fn main() -> ExitCode {
    let cli = match parse(std::env::args_os().collect()) {
        Ok(c) => c,
        Err(e) => match e.downcast::<ClapExit>() {
            Ok(ClapExit(ce)) => ce.exit(),
            Err(e) => {
                eprintln!("error: {e:#}");
                return ExitCode::FAILURE;
            }
        },
    };
    let res = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::LpfSweep(a) => commands::lpf_sweep(&a),
        Command::Spectra(a) => commands::spectra(&a),
        Command::Kernels(a) => commands::kernels(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
