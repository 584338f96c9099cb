use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use teleop_core::bridge::{serve_bridge, BridgeOptions};
use teleop_core::harness::{log_file_name, run_to_file, Experiment, HarnessError, Suite};
use teleop_core::telemetry::{
    aggregate_relative, emit_table, load_metrics_csv, metrics_to_csv, read_log, replay, AggregationMethod,
    Quantity, TableFormat, TaskMetrics,
};

#[derive(Parser)]
#[command(name = "teleop", version, about = "Delayed teleoperation testbed with motion scaling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config and write its session log.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run every config of a suite over its fixtures and compare them.
    Suite {
        #[arg(long)]
        file: PathBuf,
        /// Where to write metrics.csv and per-run logs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute task metrics from a session log.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
    /// Render a metrics CSV as tables and relative-change figures.
    Tables {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value = "per_task_ratio_mean")]
        method: AggregationMethod,
        #[arg(long, default_value = "normal")]
        baseline: String,
    },
    /// Serve the web-socket operator bridge.
    Bridge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8765")]
        listen: String,
        /// Directory for session logs.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

/// Exit codes: 0 ok, 2 config error, 3 runtime fault.
struct Failure {
    code: u8,
    msg: String,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            msg: e.to_string(),
        }
    }
}

fn config_failure(msg: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        msg: msg.to_string(),
    }
}

fn runtime_failure(msg: impl std::fmt::Display) -> Failure {
    Failure {
        code: 3,
        msg: msg.to_string(),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| config_failure(format!("{}: {e}", dir.display())))
}

fn cmd_run(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let mut exp = Experiment::load(config)?;
    if let Some(seed) = seed {
        exp.config.seed = seed;
    }
    ensure_dir(out)?;
    let log_path = out.join(log_file_name(&exp));
    let outcome = run_to_file(&exp, &log_path)?;
    print!("{}", metrics_to_csv(std::slice::from_ref(&outcome.metrics)));
    println!("log: {}", log_path.display());
    println!("ticks: {}", outcome.ticks_run);
    match outcome.fault {
        Some(f) => Err(runtime_failure(format!("run faulted: {f}"))),
        None => Ok(()),
    }
}

fn cmd_suite(file: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let suite = Suite::load(file)?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
    }
    let report = suite.run(out)?;
    print!("{}", report.render());
    if let Some(dir) = out {
        let path = dir.join("metrics.csv");
        fs::write(&path, metrics_to_csv(&report.metrics)).map_err(|e| runtime_failure(format!("{}: {e}", path.display())))?;
        println!("metrics: {}", path.display());
    }
    let faults: Vec<String> = report
        .runs
        .iter()
        .filter_map(|(label, task, o)| o.fault.as_ref().map(|f| format!("{label}/{task}: {f}")))
        .collect();
    if faults.is_empty() {
        Ok(())
    } else {
        Err(runtime_failure(faults.join("; ")))
    }
}

fn cmd_replay(log: &Path) -> Result<(), Failure> {
    let records = read_log(log).map_err(|e| config_failure(format!("{}: {e}", log.display())))?;
    let metrics = replay(&records).map_err(|e| config_failure(format!("{}: {e}", log.display())))?;
    print!("{}", metrics_to_csv(&[metrics]));
    Ok(())
}

fn config_labels(metrics: &[TaskMetrics]) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for m in metrics {
        if !out.contains(&m.config.as_str()) {
            out.push(&m.config);
        }
    }
    out
}

fn cmd_tables(metrics_path: &Path, method: AggregationMethod, baseline: &str) -> Result<(), Failure> {
    let metrics = load_metrics_csv(metrics_path).map_err(|e| config_failure(format!("{}: {e}", metrics_path.display())))?;
    let labels = config_labels(&metrics);
    if !labels.contains(&baseline) {
        return Err(config_failure(format!("baseline {baseline:?} not found in {}", metrics_path.display())));
    }
    print!("{}", emit_table(&metrics, TableFormat::Text));
    println!();
    for variant in labels.iter().filter(|l| **l != baseline) {
        for (quantity, name) in [(Quantity::Time, "time"), (Quantity::Distance, "distance")] {
            match aggregate_relative(&metrics, baseline, variant, quantity, method) {
                Ok(a) => println!(
                    "{name} {variant} vs {baseline} {method}: {:.1}% (rounded {:.0}%, n={})",
                    a.percent, a.percent, a.pairs
                ),
                Err(e) => println!("{name} {variant} vs {baseline} {method}: n/a ({e})"),
            }
        }
    }
    Ok(())
}

fn cmd_bridge(config: &Path, listen: &str, out: &Path) -> Result<(), Failure> {
    let exp = Experiment::load(config)?;
    let options = BridgeOptions {
        log_dir: out.to_path_buf(),
        ..BridgeOptions::default()
    };
    let handle = serve_bridge(exp, listen, options).map_err(runtime_failure)?;
    println!("bridge listening on http://{}", handle.local_addr());
    println!("  GET /session/config");
    println!("  GET /session/:id/metrics");
    println!("  web socket: {}", teleop_core::bridge::WS_PATH);
    handle.wait();
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, seed, out } => cmd_run(config, *seed, out),
        Command::Suite { file, out } => cmd_suite(file, out.as_deref()),
        Command::Replay { log } => cmd_replay(log),
        Command::Tables {
            metrics,
            method,
            baseline,
        } => cmd_tables(metrics, *method, baseline),
        Command::Bridge { config, listen, out } => cmd_bridge(config, listen, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
