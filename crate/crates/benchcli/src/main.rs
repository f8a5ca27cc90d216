use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nnopt_bench::{emit_report, parse_config_with_overrides, run_experiment, ConfigError, RunError};

#[derive(Parser)]
#[command(name = "nnopt-bench", version, about = "Compare SGD, CG, L-BFGS and LM training runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file.
    Run {
        config: PathBuf,
        /// `key=value`, applied after the file; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (same as `--override out=<dir>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate finished runs into a comparison table and charts.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run {
            config,
            mut overrides,
            out,
        } => {
            let text = fs::read_to_string(&config).map_err(|e| ConfigError {
                line: None,
                msg: format!("{}: {e}", config.display()),
            })?;
            if let Some(out) = out {
                overrides.push(format!("out={}", out.display()));
            }
            let cfg = parse_config_with_overrides(&text, &overrides)?;
            let mut provided = text;
            for o in &overrides {
                provided.push_str(&format!("# override: {o}\n"));
            }
            let result = run_experiment(&cfg, &provided)?;
            eprintln!("{} iterations written to {}", result.records.len(), result.dir.display());
            Ok(())
        }
        Command::Report { runs, out } => {
            let rows = emit_report(&runs, &out)?;
            for r in rows {
                println!(
                    "{:<10} {:<8} runs={} iters={} mean_ms={:.3} final_loss={:.6}",
                    r.task, r.optimizer, r.runs, r.iterations, r.mean_wall_time_ms, r.final_loss
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
