use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cla_core::runner::Experiment;
use cla_core::stream::DatasetSource;
use cla_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

/// Online continual self-supervised learning under a backward-pass budget.
#[derive(Parser, Debug)]
#[command(name = "cla", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every (strategy, seed) cell of a manifest.
    Run { config: PathBuf },
    /// Check that all strategies of a manifest declare the same CBP.
    Parity { config: PathBuf },
    /// Continue a finished run's checkpoint with i.i.d. training.
    ContinueIid {
        checkpoint: PathBuf,
        config: PathBuf,
    },
    /// Write a dataset (e.g. `synthetic:classes=20,seed=3`) to a file.
    GenDataset { descriptor: String, path: PathBuf },
}

fn is_usage(e: &Error) -> bool {
    matches!(
        e,
        Error::Config { .. } | Error::Parity(_) | Error::Io { .. } | Error::Format(_)
    )
}

fn fail(e: &Error, usage: bool) -> ExitCode {
    if usage {
        eprintln!("usage error: {e}");
        ExitCode::from(EXIT_USAGE)
    } else {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_FAILURE)
    }
}

fn load(config: &Path) -> Result<Experiment, ExitCode> {
    Experiment::load(config).map_err(|e| fail(&e, true))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => {
            let exp = match load(&config) {
                Ok(e) => e,
                Err(code) => return code,
            };
            let report = match exp.run() {
                Ok(r) => r,
                Err(e) => return fail(&e, false),
            };
            for s in &report.summaries {
                println!(
                    "{:<12} final {:.4} ± {:.4}  avg {:.4} ± {:.4}  cbp {}/{}",
                    s.strategy,
                    s.final_acc.0,
                    s.final_acc.1,
                    s.avg_acc.0,
                    s.avg_acc.1,
                    s.cbp_counted,
                    s.cbp_declared
                );
            }
            if report.is_success() {
                println!("artifacts in {}", report.output_dir.display());
                ExitCode::SUCCESS
            } else {
                for f in report.failures() {
                    eprintln!(
                        "cell {} failed: {}",
                        f.run_id,
                        f.outcome.as_ref().err().map_or("", |s| s.as_str())
                    );
                }
                ExitCode::from(EXIT_FAILURE)
            }
        }
        Command::Parity { config } => {
            let exp = match load(&config) {
                Ok(e) => e,
                Err(code) => return code,
            };
            for e in &exp.parity.entries {
                println!(
                    "{:<12} cbp {:>12}  {}  b={} n_p={}",
                    e.label, e.cbp, e.composition, e.b, e.n_p
                );
            }
            println!("parity ok: cbp = {}", exp.parity.cbp);
            ExitCode::SUCCESS
        }
        Command::ContinueIid { checkpoint, config } => {
            let exp = match load(&config) {
                Ok(e) => e,
                Err(code) => return code,
            };
            match exp.continue_iid(&checkpoint) {
                Ok(path) => {
                    println!("curves in {}", path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    let usage =
                        is_usage(&e) || matches!(e, Error::Integrity(_) | Error::Protocol(_));
                    fail(&e, usage)
                }
            }
        }
        Command::GenDataset { descriptor, path } => {
            let ds = match DatasetSource::parse(&descriptor).and_then(|s| s.load()) {
                Ok(ds) => ds,
                Err(e) => return fail(&e, true),
            };
            match ds.save(&path) {
                Ok(()) => {
                    println!(
                        "{} samples x {} features, {} classes -> {}",
                        ds.len(),
                        ds.dim(),
                        ds.class_count(),
                        path.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e, false),
            }
        }
    }
}
