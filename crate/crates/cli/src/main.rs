use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gridcast_core::harness::{self, ExperimentConfig, RunError};
use gridcast_core::ingest::{generate_synthetic, write_dataset, SyntheticConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_METHOD: u8 = 4;

#[derive(Parser)]
#[command(name = "gridcast", version, about = "Short-term electricity price forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured methods and write a report plus plot data.
    Run {
        /// TOML experiment config; every key is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (overrides run.output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score every method on the rolling-origin windows.
        #[arg(long)]
        unified_eval: bool,
        /// Run methods concurrently.
        #[arg(long)]
        parallel_methods: bool,
    },
    /// Write a synthetic dataset as one CSV per stream.
    Synth {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 730)]
        days: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a finished run's summary and rewrite its plot data.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            unified_eval,
            parallel_methods,
        } => run(config, out, unified_eval, parallel_methods),
        Command::Synth { seed, days, out } => synth(seed, days, out),
        Command::Report { input } => report(input),
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("gridcast: {msg}");
    ExitCode::from(code)
}

fn run(config: Option<PathBuf>, out: Option<PathBuf>, unified_eval: bool, parallel_methods: bool) -> ExitCode {
    let mut cfg = match config {
        Some(p) => match ExperimentConfig::load(&p) {
            Ok(c) => c,
            Err(e) => return fail(EXIT_CONFIG, e),
        },
        None => ExperimentConfig::default(),
    };
    match harness::seed_from_env() {
        Ok(Some(seed)) => cfg.run.seed = seed,
        Ok(None) => {}
        Err(e) => return fail(EXIT_CONFIG, e),
    }
    cfg.run.unified_eval |= unified_eval;
    cfg.run.parallel_methods |= parallel_methods;
    if let Some(out) = out {
        cfg.run.output_dir = out;
    }
    let dir = cfg.run.output_dir.clone();
    match harness::run_to_dir(&cfg, &dir) {
        Ok(report) => {
            print!("{}", harness::summary(&report));
            println!("wrote {}", dir.display());
            let failed = report.failed();
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                let names: Vec<&str> = failed.iter().map(|m| m.name()).collect();
                fail(EXIT_METHOD, format!("methods failed: {}", names.join(", ")))
            }
        }
        Err(e @ RunError::Config(_)) => fail(EXIT_CONFIG, e),
        Err(e) => fail(EXIT_DATA, e),
    }
}

fn synth(seed: u64, days: usize, out: PathBuf) -> ExitCode {
    let cfg = SyntheticConfig {
        seed,
        days,
        ..Default::default()
    };
    let ds = match generate_synthetic(&cfg) {
        Ok(ds) => ds,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if let Err(e) = write_dataset(&ds, &out) {
        return fail(EXIT_DATA, e);
    }
    let meta = out.join("synthetic.json");
    let body = serde_json::to_string_pretty(&cfg).expect("synthetic config serializes");
    if let Err(e) = std::fs::write(&meta, body) {
        return fail(EXIT_DATA, format!("{}: {e}", meta.display()));
    }
    println!("wrote {} days ({} steps) to {}", days, ds.steps(), out.display());
    ExitCode::SUCCESS
}

fn report(input: PathBuf) -> ExitCode {
    let report = match harness::read_report(&input) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_DATA, e),
    };
    let cfg_path = input.join("config.toml");
    if cfg_path.exists() {
        match ExperimentConfig::load(&cfg_path) {
            Ok(cfg) if !report.verify(&cfg) => {
                eprintln!("gridcast: warning: config.toml does not match the report's provenance hash")
            }
            Ok(_) => {}
            Err(e) => return fail(EXIT_CONFIG, e),
        }
    }
    if let Err(e) = harness::emit_plot_data(&report, input.join("plots")) {
        return fail(EXIT_DATA, e);
    }
    print!("{}", harness::summary(&report));
    if report.failed().is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_METHOD)
    }
}
