//! `poladca`: generate data, train, stream-diagnose and probe robustness.
//!
//! Exit codes: 0 success, 2 usage/configuration/IO, 3 numeric failure
//! (divergence, non-finite values), 4 a checked invariant was violated.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use poladca_core::diagnose::DiagnoseError;
use poladca_core::numkit::{NumError, CHECKPOINT_SCHEMA_VERSION};
use poladca_core::robustlab::RobustError;
use poladca_core::trainer::TrainError;

use commands::Suite;
use config::parse_set;

/// A result that ran to completion but broke a checked invariant.
#[derive(Debug, thiserror::Error)]
#[error("invariant violated: {0}")]
pub struct InvariantViolation(pub String);

#[derive(Parser)]
#[command(name = "poladca", about = "Polarized dual-channel attention for graph fault diagnosis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON object of dotted keys, e.g. {"model.d_model": 32}.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_set)]
    sets: Vec<(String, String)>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-channel dataset as CSV files plus a manifest.
    Gendata {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write checkpoint, report, confusion matrix and split.
    Train {
        #[arg(long)]
        manifest: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// gcn, dca or poladca.
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Seeds both the split and the model.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Classify a stream of time steps (CSV rows) with sliding windows; one
    /// JSON line per window.
    Diagnose {
        #[arg(long)]
        checkpoint: Option<String>,
        /// CSV file, or `-` for standard input.
        #[arg(long)]
        input: Option<String>,
        #[arg(long)]
        output: Option<String>,
        #[arg(long)]
        window_len: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Robustness experiments: bound checks, Lipschitz hierarchy,
    /// amplification factors and FLOP counts.
    Robust {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value = "robust_out")]
        out: PathBuf,
        /// Noise trials (lemmas: total, hierarchy: per probe sample).
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        n: Option<u64>,
        #[arg(long)]
        d: Option<u64>,
        /// Comma-separated mixture weights.
        #[arg(long)]
        alpha: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        rho: Option<f64>,
        /// Comma-separated training seeds.
        #[arg(long)]
        seeds: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

/// Appends typed flag values as `key=value` overrides after `--set` ones.
fn with_flags(mut sets: Vec<(String, String)>, flags: &[(&str, Option<String>)]) -> Vec<(String, String)> {
    for (k, v) in flags {
        if let Some(v) = v {
            sets.push((k.to_string(), v.clone()));
        }
    }
    sets
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gendata { out, seed, common } => {
            let sets = with_flags(common.sets, &[("seed", s(&seed))]);
            commands::gendata(common.config.as_deref(), &sets, &out)
        }
        Command::Train { manifest, out, scheme, epochs, seed, common } => {
            let sets = with_flags(
                common.sets,
                &[
                    ("manifest", manifest),
                    ("model.scheme", scheme),
                    ("model.epochs", s(&epochs)),
                    ("model.seed", s(&seed)),
                    ("split_seed", s(&seed)),
                ],
            );
            commands::train(common.config.as_deref(), &sets, &out)
        }
        Command::Diagnose { checkpoint, input, output, window_len, stride, k, common } => {
            let sets = with_flags(
                common.sets,
                &[
                    ("checkpoint", checkpoint),
                    ("input", input),
                    ("output", output),
                    ("window_len", s(&window_len)),
                    ("stride", s(&stride)),
                    ("k", s(&k)),
                ],
            );
            commands::diagnose(common.config.as_deref(), &sets)
        }
        Command::Robust { suite, out, trials, n, d, alpha, rho, seeds, common } => {
            let trials_key = if suite == Suite::Hierarchy { "hierarchy.trials" } else { "lemmas.trials" };
            let sets = with_flags(
                common.sets,
                &[
                    (trials_key, s(&trials)),
                    ("flops.n", s(&n)),
                    ("flops.d", s(&d)),
                    ("gamma.alpha", alpha),
                    ("gamma.rho", s(&rho)),
                    ("hierarchy.seeds", seeds),
                ],
            );
            commands::robust(suite, common.config.as_deref(), &sets, &out)
        }
    }
}

/// Maps an error chain to the documented exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<InvariantViolation>() {
            return 4;
        }
        let numeric = if let Some(e) = cause.downcast_ref::<TrainError>() {
            e.is_numeric()
        } else if let Some(e) = cause.downcast_ref::<RobustError>() {
            match e {
                RobustError::Train(t) => t.is_numeric(),
                RobustError::Num(NumError::NonFinite(_)) => true,
                _ => false,
            }
        } else if let Some(e) = cause.downcast_ref::<DiagnoseError>() {
            matches!(e, DiagnoseError::Train(t) if t.is_numeric())
        } else {
            matches!(cause.downcast_ref::<NumError>(), Some(NumError::NonFinite(_)))
        };
        if numeric {
            return 3;
        }
    }
    2
}

/// The error chain joined by `: `, skipping causes an outer message
/// already spells out.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let version: &'static str = Box::leak(
        format!("{} (checkpoint schema {CHECKPOINT_SCHEMA_VERSION})", env!("CARGO_PKG_VERSION")).into_boxed_str(),
    );
    let matches = Cli::command().version(version).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
