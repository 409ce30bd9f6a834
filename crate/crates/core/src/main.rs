use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use frontlab::cli;

#[derive(Parser)]
#[command(name = "frontlab", version, about = "Traveling fronts, weighted spectra and stable foliations")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments of a TOML config.
    Run {
        config: PathBuf,
        /// Output directory, overriding `output` in the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print documentation for a topic: config, pipeline, outputs or models.
    Describe { topic: String },
}

fn main() -> ExitCode {
    let args = Args::parse();
    match args.command {
        Command::Run { config, output } => match cli::run(&config, output.as_deref()) {
            Ok(report) => {
                for c in &report.summary.checks {
                    let mark = if c.pass { "PASS" } else { "FAIL" };
                    println!("{mark} {}/{} value={:.6e} ({})", c.stage, c.name, c.value, c.threshold);
                }
                println!("artifacts in {}", report.output.display());
                if report.pass {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Command::Describe { topic } => match cli::describe(&topic) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
