use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use detshare::config::{ConfigError, Loaded, PolicySpec};
use detshare::eventlog::write_event_log;
use detshare::output::{metrics_json, num, write_latency_csv};
use detshare::run::{run_paired, PairedRun};
use detshare::sweep::{divergence_sweep, write_csv};
use detshare_core::determinism::FloatFormat;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "detshare", version, about = "Spatial GPU sharing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its metrics as JSON.
    Simulate {
        config: PathBuf,
        /// Overrides the config's policy name (its parameters are kept).
        #[arg(long)]
        policy: Option<String>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event log (JSON Lines) here.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Write the metrics here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-request latencies as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Reduce random vectors with one chunk and with each split; CSV out.
    DivergenceSweep {
        #[arg(long, default_value = "fp16")]
        format: FloatFormat,
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
        splits: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run two scenarios and report both, including normalized throughput.
    Compare {
        first: PathBuf,
        second: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    /// Bad input: exit 2.
    Config(String),
    /// Anything else: exit 1.
    Run(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure::Run(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json(value: &Value, path: Option<&Path>) -> Result<(), Failure> {
    let mut out = sink(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Failure::Run(e.to_string()))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn simulate_config(path: &Path, policy: Option<&str>, seed: Option<u64>, log: bool) -> Result<(PairedRun, PolicySpec), Failure> {
    let loaded = Loaded::read(path)?;
    let mut spec = loaded.config.policy.spec();
    if let Some(name) = policy {
        spec.name = name.into();
    }
    let policy = spec.build()?;
    let mut scenario = loaded.scenario(seed.unwrap_or(loaded.config.seed))?;
    scenario.engine.record_log = log;
    let run = run_paired(&scenario, policy.as_ref()).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
    Ok((run, spec))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { config, policy, seed, log, out, csv } => {
            let (run, _) = simulate_config(&config, policy.as_deref(), seed, log.is_some())?;
            if let Some(p) = &log {
                let mut w = sink(Some(p))?;
                write_event_log(&run.shared.log, &mut w)?;
                w.flush()?;
            }
            if let Some(p) = &csv {
                let mut w = sink(Some(p))?;
                write_latency_csv(&run.shared, &mut w)?;
                w.flush()?;
            }
            write_json(&metrics_json(&run.metrics), out.as_deref())
        }
        Command::DivergenceSweep { format, n, splits, seeds, out } => {
            let rows = divergence_sweep(format, n, &splits, seeds).map_err(|e| Failure::Config(e.to_string()))?;
            let mut w = sink(out.as_deref())?;
            write_csv(&rows, &mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::Compare { first, second, seed, out } => {
            let mut runs = Vec::new();
            for path in [&first, &second] {
                let (run, spec) = simulate_config(path, None, seed, false)?;
                runs.push(json!({
                    "config": path.display().to_string(),
                    "policy": spec.name,
                    "aggregate_normalized": run.metrics.aggregate_normalized.as_ref().map_or(Value::Null, num),
                    "metrics": metrics_json(&run.metrics),
                }));
            }
            write_json(&json!({ "runs": runs }), out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
