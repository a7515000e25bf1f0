//! `milkt` — generate synthetic MIL datasets, train teachers, run knowledge
//! transfer, evaluate checkpoints, and verify gradients.
//!
//! Exit codes: 0 ok, 1 config/contract error, 2 I/O error, 3 verification
//! failure.

mod experiment;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use milkt_core::gradcheck::{run_gradcheck, GradcheckScope};

#[derive(Parser)]
#[command(name = "milkt", version, about = "Knowledge transfer for attention-MIL classifiers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic MIL dataset (optionally pre-split).
    GenData(GenDataArgs),
    /// Train models from scratch (or fine-tune from a checkpoint), one run per seed.
    Train(TrainArgs),
    /// Run a knowledge-transfer method against a frozen teacher checkpoint.
    Transfer(TransferArgs),
    /// Evaluate a checkpoint on a dataset split and print the metrics JSON.
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Built-in profile name (tcga_a, tcga_b, came_like) or a profile JSON file.
    #[arg(long)]
    profile: String,
    #[arg(long, default_value_t = 100)]
    n_bags: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Feature width for built-in profiles.
    #[arg(long)]
    d_in: Option<usize>,
    /// Override instance-count range, e.g. 50:200.
    #[arg(long)]
    n_range: Option<String>,
    /// Override the noise scale of built-in profiles.
    #[arg(long)]
    noise: Option<f64>,
    /// Split into train/val/test subdirectories by ratio, e.g. 6:1.5:2.5.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = false)]
    no_overwrite: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Architecture preset: tiny, small, big.
    #[arg(long)]
    arch: Option<String>,
    /// Comma-separated seeds, e.g. 0,1,2.
    #[arg(long)]
    seeds: Option<String>,
    /// Fine-tune: initialize every run from this checkpoint.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// JSON config file; explicit flags win over file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    no_overwrite: bool,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Teacher checkpoint directory.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// none, finetune, logit, attention, feature_pts, mhfa.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    student_arch: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of adaptation heads (mhfa).
    #[arg(long)]
    heads: Option<usize>,
    /// Gated-pool hidden width (mhfa).
    #[arg(long)]
    pool_hidden: Option<usize>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// JSON config file; explicit flags win over file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    no_overwrite: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Dataset split subdirectory (train, val, test); omit for a flat dataset dir.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// tensor-core, mil, mhfa, or all.
    #[arg(long, default_value = "all")]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Command failure carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or contract violation (exit 1).
    Config(String),
    /// Filesystem or data-format failure (exit 2).
    Io(String),
    /// Verification failure (exit 3).
    Verify(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Verify(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Verify(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are not errors; true usage errors are config
            // errors under this tool's exit-code contract.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::GenData(args) => experiment::cmd_gen_data(args),
        Cmd::Train(args) => experiment::cmd_train(args),
        Cmd::Transfer(args) => experiment::cmd_transfer(args),
        Cmd::Eval(args) => experiment::cmd_eval(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let scope: GradcheckScope = args.scope.parse().map_err(CliError::Config)?;
    let report = run_gradcheck(scope, args.seed);
    for entry in &report.entries {
        println!("{:<40} max_rel_err {:.3e}", entry.name, entry.max_rel_err);
    }
    if report.passed() {
        println!("gradcheck PASS ({} checks, tolerance {:.0e})", report.entries.len(), report.tolerance);
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|f| f.name.as_str()).collect();
        Err(CliError::Verify(format!(
            "gradcheck FAIL: {} above tolerance {:.0e}",
            names.join(", "),
            report.tolerance
        )))
    }
}

