use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qkdlink::harness::output::{write_atomic, write_json};
use qkdlink::harness::{
    cmd_keyrate, cmd_simulate, feedback_bench, sync_bench, HarnessError, KeyRateOverrides, RunConfig,
};

#[derive(Parser)]
#[command(name = "qkdlink", version, about = "Decoy-state BB84 link simulator and key-rate analyzer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full link simulation and write its artifacts.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-key analysis of a counts file.
    Keyrate {
        #[arg(long)]
        counts: PathBuf,
        #[arg(long)]
        eps_sec: Option<f64>,
        #[arg(long)]
        eps_cor: Option<f64>,
        #[arg(long)]
        f_ec: Option<f64>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synchronization lock statistics against channel loss.
    SyncBench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trials: u64,
        /// Directory for sync_bench.csv and trials.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired runs with and without polarization feedback.
    FeedbackBench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn csv_bytes<T: serde::Serialize>(rows: &[T], path: &Path) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Io { path: path.display().to_string(), message: e.to_string() })?;
    }
    w.into_inner().map_err(|e| HarnessError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn print(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Simulate { config, seed, out } => {
            let summary = cmd_simulate(&config, seed, out)?;
            print(&summary.key_rate);
        }
        Command::Keyrate { counts, eps_sec, eps_cor, f_ec, out } => {
            let report = cmd_keyrate(&counts, KeyRateOverrides { eps_sec, eps_cor, f_ec })?;
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            print(&report);
        }
        Command::SyncBench { config, trials, out } => {
            let config = RunConfig::load(&config)?;
            let (rows, results) = sync_bench(&config, trials)?;
            let dir = out.unwrap_or_else(|| config.run.output_dir.clone());
            let path = dir.join("sync_bench.csv");
            write_atomic(&path, &csv_bytes(&rows, &path)?)?;
            write_json(&dir.join("trials.json"), &results)?;
            print(&rows);
        }
        Command::FeedbackBench { config, out } => {
            let config = RunConfig::load(&config)?;
            let output = feedback_bench(&config)?;
            let dir = out.unwrap_or_else(|| config.run.output_dir.clone());
            for (i, (on, off)) in output.traces.iter().enumerate() {
                for (name, trace) in [("on", on), ("off", off)] {
                    let path = dir.join(format!("qber_trace_{name}_{i}.csv"));
                    let mut bytes = Vec::new();
                    trace.write_csv(&mut bytes).map_err(|e| HarnessError::Io {
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })?;
                    write_atomic(&path, &bytes)?;
                }
            }
            write_json(&dir.join("feedback_bench.json"), &output.report)?;
            print(&output.report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
