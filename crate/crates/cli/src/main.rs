//! `saddle-averager <experiment> --config <path> [--seed-list 1,2,3] [--out <dir>]`
//!
//! Exit codes: 0 success, 2 configuration error, 3 at least one seed failed,
//! 1 anything else (I/O, solver errors). Worker threads are set with
//! `SADDLE_AVERAGER_THREADS`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use saddle_averager_core::harness::{self, parse_seed_list, THREADS_ENV};
use saddle_averager_core::{Error, Experiment, ExperimentConfig};

// glibc returns large freed blocks to the OS and refaults them every step
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_SEED_FAILURE: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "saddle-averager",
    version,
    about = "Parameter averaging experiments for two-player min-max games",
    after_help = format!("Environment:\n  {THREADS_ENV}  number of worker threads for seed-parallel runs")
)]
struct Args {
    /// bilinear, stability, mog or avg-sweep
    experiment: String,
    /// Flat `key = value` configuration file
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds, overriding the config
    #[arg(long = "seed-list")]
    seed_list: Option<String>,
    /// Output directory, overriding the config
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(EXIT_CONFIG),
            };
        }
    };
    match run(&args) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_OTHER,
            })
        }
    }
}

fn run(args: &Args) -> Result<u8, Error> {
    let experiment: Experiment = args.experiment.parse()?;
    let mut cfg = ExperimentConfig::from_file(&args.config, Some(experiment))?;
    if let Some(list) = &args.seed_list {
        cfg.seeds = parse_seed_list(list)?;
    }
    if let Some(out) = &args.out {
        cfg.output = out.clone();
    }
    cfg.validate()?;

    let report = harness::run(&cfg)?;
    report.write_to(&cfg.output)?;

    for row in &report.summary {
        println!(
            "{:<14} {:<12} mean {:.6} std {:.6} median {:.6} (n={})",
            row.variant, row.metric, row.mean, row.std, row.median, row.n
        );
    }
    for f in &report.failures {
        eprintln!(
            "seed {} failed at iteration {}: {}",
            f.seed, f.iteration, f.message
        );
    }
    println!(
        "{}: {} records written to {}",
        experiment.name(),
        report.records.len(),
        cfg.output.display()
    );
    Ok(if report.failures.is_empty() {
        0
    } else {
        EXIT_SEED_FAILURE
    })
}
