//! `fatcc` command line: run config-driven experiments and compare reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fatcc::{compare_reports, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "fatcc",
    version,
    about = "Federated adversarial training simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a config file.
    Run {
        /// Path to a flat `key = value` config file.
        #[arg(long)]
        config: PathBuf,
        /// Additional `key=value` overrides, applied after the file.
        overrides: Vec<String>,
    },
    /// Compare the summary rows of two CSV reports (first minus second).
    Compare { first: PathBuf, second: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> fatcc::Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let config = ExperimentConfig::parse(&config, &overrides)?;
            let method = config.round.method.name().to_string();
            let outcome = run_experiment(&config)?;
            let summary = &outcome.summary;
            println!(
                "{method}: {} rounds, last-5 mean CA {:.2}%",
                outcome.reports.len(),
                summary.clean_accuracy * 100.0
            );
            for (name, ra) in &summary.robust_accuracy {
                println!("  RA ({name}): {:.2}%", ra * 100.0);
            }
            println!("  train loss: {:.6}", summary.train_loss);
            println!("report written to {}", outcome.csv_path.display());
        }
        Command::Compare { first, second } => {
            let comparison = compare_reports(&first, &second)?;
            print!("{comparison}");
            println!("metric,first,second,delta");
            for m in &comparison.metrics {
                println!("{},{},{},{}", m.metric, m.first, m.second, m.delta);
            }
        }
    }
    Ok(())
}
