use std::path::PathBuf;
use std::process::ExitCode;

use ccbf_cli::matrix::{summary_table, EXIT_IO};
use ccbf_cli::{parse_config, run_matrix};
use clap::{Parser, Subcommand};

/// Consolidated-CBF simulator.
#[derive(Parser)]
#[command(name = "ccbf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scenario × controller pair of a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Parallel runs (default: one per core).
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory; overrides `run.out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in scenarios and controllers.
    ListScenarios,
    /// Parse and validate a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

const SCENARIOS: &str = "\
scenarios:
  1d        1-D tracking between two control singularities; [one_dim] gamma, theta give the matrix
  bicycle   kinematic bicycle reaching a shrinking goal disk past five obstacles
controllers:
  ccbf-qp, ccbf-flow      adaptive consolidated CBF (acceptance-gated)
  ecbf-qp:<k1>:<k2>       exponential CBF baseline (informational)
  ecbf-schedule           the four baseline gain pairs
  nominal                 nominal input only (informational)";

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListScenarios => {
            println!("{SCENARIOS}");
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match parse_config(&config) {
            Ok(cfg) => {
                print!("{cfg}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {}: {e}", config.display());
                ExitCode::from(EXIT_IO)
            }
        },
        Command::Run { config, jobs, out } => {
            let cfg = match parse_config(&config) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("error: {}: {e}", config.display());
                    return ExitCode::from(EXIT_IO);
                }
            };
            if jobs == Some(0) {
                eprintln!("error: --jobs must be at least 1");
                return ExitCode::from(EXIT_IO);
            }
            let out = out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("ccbf-out"));
            let report = run_matrix(&cfg, jobs, &out);
            print!("{}", summary_table(&report.runs));
            for e in &report.io_errors {
                eprintln!("error: {e}");
            }
            if report.io_errors.is_empty() {
                println!("wrote {} runs to {}", report.runs.len(), out.display());
            }
            ExitCode::from(report.exit_code())
        }
    }
}
