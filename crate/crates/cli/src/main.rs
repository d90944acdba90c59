mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unfoldse::{Error, FusionMode};

/// Selects the compute device. Only `cpu` is available in this build.
pub const DEVICE_ENV: &str = "UNFOLDSE_DEVICE";

#[derive(Debug, Parser)]
#[command(name = "unfoldse", version, about = "Deep-unfolded speech enhancement")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Model checkpoint to load.
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Number of unfolding steps.
    #[arg(long, global = true, value_name = "N")]
    q: Option<usize>,
    /// Fusion mode: R (residual), G (gated mask) or A (average).
    #[arg(long, global = true, value_name = "MODE")]
    fusion: Option<FusionMode>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on the configured manifests.
    Train(commands::TrainArgs),
    /// Enhance WAV files with a trained checkpoint.
    Enhance(commands::EnhanceArgs),
    /// Score a manifest with SI-SNR before and after enhancement.
    Evaluate(commands::EvaluateArgs),
    /// Write a synthetic clean/noise corpus and its manifest.
    Toygen(commands::ToygenArgs),
    /// Print parameter counts of the configured model.
    Inspect,
    /// Sweep unfolding depth and fusion mode.
    Ablate(commands::AblateArgs),
}

/// Failure with the process exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_data_error() || matches!(e, Error::Checkpoint { .. }) {
            2
        } else if e.is_numeric_failure() || matches!(e, Error::Tensor(_) | Error::Shape { .. }) {
            3
        } else {
            1
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn check_device() -> Result<(), Failure> {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => {
            Err(Failure::usage(format!("{DEVICE_ENV}={d} is not available; this build supports `cpu` only")))
        }
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stdout)
        .format_timestamp(None)
        .format_target(false)
        .init();
    let result = check_device().and_then(|()| commands::run(&cli.global, &cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
