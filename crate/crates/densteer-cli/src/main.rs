//! `densteer` command line: run or validate density-steering scenarios.
//!
//! Exit codes: 0 on success, 2 on validation/configuration errors, 3 on
//! numerical failures (a diagnostics file is left in the output
//! directory).

use clap::{Parser, Subcommand};
use densteer::scenario::{self, RunMode};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "densteer", version, about = "Density steering for feedback linearizable systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write artifacts.
    Run {
        /// Scenario file (TOML, conventionally `.scn`).
        scenario: PathBuf,
        /// Output directory for artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario's run mode.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<RunMode>,
        /// Override scenario keys, e.g. --set bridge.epsilon=0.25
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Statically check a scenario file; prints diagnostics.
    Validate { scenario: PathBuf },
}

fn parse_mode(s: &str) -> Result<RunMode, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            out,
            mode,
            set,
        } => match scenario::run(&scenario, &out, mode, &set) {
            Ok(output) => {
                println!("run complete: mode {:?}", output.mode);
                println!("scenario hash {}", output.scenario_hash);
                if let Some(a) = &output.analysis {
                    println!(
                        "relative degree {:?} (sum {}), feasible: {}",
                        a.pi, a.total_relative_degree, a.feasible
                    );
                }
                if let Some(s) = &output.steering {
                    println!(
                        "bridge converged in {} iterations; boundary L1 = ({:.3e}, {:.3e})",
                        s.iterations, s.boundary_l1_0, s.boundary_l1_1
                    );
                }
                if let Some(s) = &output.simulation {
                    println!(
                        "simulation: terminal mean {:?}, exit flags {}",
                        s.terminal_mean, s.exit_flags
                    );
                }
                println!("artifacts in {}", output.out_dir.display());
                ExitCode::SUCCESS
            }
            Err(err) => {
                eprintln!("error: {err}");
                if err.is_validation() {
                    ExitCode::from(2)
                } else {
                    let _ = std::fs::create_dir_all(&out);
                    let _ = std::fs::write(
                        out.join("error.txt"),
                        format!("numerical failure:\n{err}\n"),
                    );
                    ExitCode::from(3)
                }
            }
        },
        Command::Validate { scenario } => match scenario::validate(&scenario) {
            Ok(diags) if diags.is_empty() => {
                println!("ok: scenario is well-formed");
                ExitCode::SUCCESS
            }
            Ok(diags) => {
                for d in &diags {
                    println!("{d}");
                }
                ExitCode::from(2)
            }
            Err(err) => {
                eprintln!("error: {err}");
                ExitCode::from(2)
            }
        },
    }
}
