//! `fedbn`: partition, train, evaluate and gradient-check from the command line.
//!
//! Exit codes: 0 ok, 1 configuration or usage error, 2 runtime or numeric
//! error, 3 I/O or parse error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedbn_core::config::{parse_config, ExperimentConfig};
use fedbn_core::experiment::{cmd_eval, cmd_gradcheck, cmd_partition, cmd_train};
use fedbn_core::{Error, ErrorCategory};

#[derive(Parser)]
#[command(
    name = "fedbn",
    version,
    about = "Deterministic FedAvg simulator with batch-norm instrumentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split the training set across clients and write manifest.csv
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the configured master seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run FedAvg and write metrics.csv, model.bin and the resolved config
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for client updates; results do not depend on it
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        threads: u32,
    },
    /// Print the top-1 accuracy of a saved model on a CSV dataset
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Check every layer's backward pass against finite differences
    Gradcheck {
        /// Also check the model described by this config
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(config: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = parse_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Partition { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let path = cmd_partition(&cfg, &out_dir(&cfg, out))?;
            println!("wrote {}", path.display());
        }
        Command::Train {
            config,
            out,
            seed,
            threads,
        } => {
            let cfg = load(&config, seed)?;
            let dir = out_dir(&cfg, out);
            let outcome = cmd_train(&cfg, &dir, threads as usize)?;
            println!(
                "rounds={} test_acc={} out={}",
                outcome.records.len(),
                outcome.final_accuracy,
                dir.display()
            );
        }
        Command::Eval { model, data } => {
            println!("{}", cmd_eval(&model, &data)?);
        }
        Command::Gradcheck { config, seed } => {
            let cfg = config.as_deref().map(|c| load(c, None)).transpose()?;
            let checks = cmd_gradcheck(cfg.as_ref(), seed)?;
            let mut failed = 0;
            for c in &checks {
                let verdict = if c.passed() { "pass" } else { "FAIL" };
                println!(
                    "{verdict} {:<40} input {:.2e} params {:.2e}",
                    c.name, c.input_error, c.param_error
                );
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                return Err(Error::GradCheck(format!(
                    "{failed} of {} gradient checks failed",
                    checks.len()
                )));
            }
            println!("all {} gradient checks passed", checks.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.module());
            ExitCode::from(match e.category() {
                ErrorCategory::Config => 1,
                ErrorCategory::Runtime => 2,
                ErrorCategory::Io => 3,
            })
        }
    }
}
