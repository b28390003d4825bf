use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use cmda_core::data::{generate_synthetic, SyntheticSpec};
use cmda_core::runner::{self, DataSource, RunOptions, SweepOutcome};
use cmda_core::selftest;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "cmda", version, about = "Train CNN classifiers with MMD domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Execution {
    /// Runs executed concurrently (each run stays single-threaded).
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Write measured wall-clock seconds instead of 0 (breaks byte-identical reruns).
    #[arg(long)]
    record_timing: bool,
}

impl Execution {
    fn options(&self) -> RunOptions {
        RunOptions {
            parallel: self.parallel,
            record_timing: self.record_timing,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every spec in a JSON config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        exec: Execution,
    },
    /// Run the six Table 1 configurations.
    SweepTable1 {
        /// `synthetic`, or a dataset root with source/ and target/ trees.
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[command(flatten)]
        exec: Execution,
    },
    /// Write a synthetic two-domain dataset as PNG files.
    GenData {
        /// JSON synthetic spec; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-row metric deltas between two reports.
    Compare {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Run the gradient and reference-implementation checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn summarize(outcome: &SweepOutcome) -> ExitCode {
    for row in &outcome.rows {
        let acc = row.testing_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        println!("{:<24} testing_accuracy {acc:<8} {}", row.name, row.status.as_deref().unwrap_or("ok"));
    }
    println!("report: {}", outcome.report_path.display());
    if outcome.all_ok() {
        ExitCode::SUCCESS
    } else {
        eprintln!("one or more runs failed");
        ExitCode::FAILURE
    }
}

fn data_source(arg: &str) -> DataSource {
    if arg == "synthetic" {
        DataSource::Synthetic(SyntheticSpec::default())
    } else {
        DataSource::Root(PathBuf::from(arg))
    }
}

fn read_spec(path: Option<&Path>) -> Result<SyntheticSpec> {
    let Some(path) = path else {
        return Ok(SyntheticSpec::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn execute(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train { config, out, exec } => {
            let specs = runner::parse_config(&config, &out)?;
            let outcome = runner::run(&specs, &out, exec.options())?;
            Ok(summarize(&outcome))
        }
        Command::SweepTable1 {
            data,
            out,
            seed,
            epochs,
            exec,
        } => {
            let specs = runner::table1_sweep(&data_source(&data), seed, epochs, &out);
            let outcome = runner::run(&specs, &out, exec.options())?;
            Ok(summarize(&outcome))
        }
        Command::GenData { spec, out } => {
            let spec = read_spec(spec.as_deref())?;
            let (source, target) = generate_synthetic(&spec, &out)?;
            println!(
                "wrote {} source and {} target images under {}",
                source.len(),
                target.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { report, reference } => {
            let deltas = runner::compare_report(&report, &reference)?;
            print!("{}", runner::render_deltas(&deltas));
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest { seed } => {
            let checks = selftest::run_all(seed);
            for c in &checks {
                println!("{} {:<16} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(if checks.iter().all(|c| c.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
