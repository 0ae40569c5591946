use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ssa_tradeoff::scenario::{self, FilterName, Mode, Overrides, RunOptions};
use ssa_tradeoff::synthesis::SynthesisStatus;

#[derive(Parser, Debug)]
#[command(name = "ssa-tradeoff", version, about = "Privacy/utility synthetic-noise synthesis for orbit tracking scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario file and write the reports.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// utility, privacy, utility_aware, privacy_aware or precision
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        /// enkf or ukf
        #[arg(long)]
        filter: Option<FilterName>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        dump_problem: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { scenario: path, out, mode, seed, filter, tol, dump_problem } => {
            let overrides = Overrides { mode, seed, filter, tol };
            let loaded = scenario::load_scenario(&path).and_then(|s| s.with_overrides(&overrides));
            let s = match loaded {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            match scenario::run(&s, &out, &RunOptions { dump_problem }) {
                Ok(report) => {
                    println!(
                        "{}: {:?} ({:?}), certified = {}",
                        report.formulation, report.status, report.metadata.filter, report.certified
                    );
                    for site in &report.sites {
                        println!("  site {} at {} s: precision sum {:.6e}", site.site, site.time_s, site.precision_sum);
                    }
                    for m in report.utility.iter().chain(&report.privacy) {
                        println!("  {}: trace {:.6e} km², sqrt {:.6e} km", m.label, m.achieved_trace_km2, m.achieved_sqrt_trace_km);
                    }
                    if let Some(msg) = &report.message {
                        println!("  note: {msg}");
                    }
                    match report.status {
                        SynthesisStatus::Optimal => ExitCode::SUCCESS,
                        SynthesisStatus::Infeasible => ExitCode::from(2),
                        _ => ExitCode::from(1),
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
