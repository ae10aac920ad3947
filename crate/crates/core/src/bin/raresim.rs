use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use raresim::harness::{run_experiment, ExperimentConfig, PRESETS};

/// Rare-event probabilities for Markov random walks by duo-exponential
/// tilting importance sampling.
///
/// Settings are taken from flags first, then RARESIM_* environment
/// variables, then the experiment file.
#[derive(Debug, Parser)]
#[command(name = "raresim", version)]
struct Cli {
    /// Experiment file (TOML).
    #[arg(long, env = "RARESIM_CONFIG", value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run a named preset with default settings instead of a file.
    #[arg(long, env = "RARESIM_PRESET", value_name = "NAME", conflicts_with = "config")]
    preset: Option<String>,

    /// Master seed.
    #[arg(long, env = "RARESIM_SEED", value_name = "U64")]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, env = "RARESIM_WORKERS", value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,

    /// Paths per estimate.
    #[arg(long, env = "RARESIM_SAMPLES", value_name = "N")]
    samples: Option<usize>,

    /// Output directory.
    #[arg(long, env = "RARESIM_OUTPUT", value_name = "DIR")]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };

    let loaded = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path),
        (None, Some(name)) => ExperimentConfig::for_preset(name),
        (None, None) => {
            eprintln!("error: one of --config or --preset is required (presets: {})", PRESETS.join(", "));
            eprintln!("\nFor more information, try '--help'.");
            return ExitCode::from(2);
        }
    };
    let mut cfg = match loaded {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w as usize);
    }
    if let Some(n) = cli.samples {
        cfg.samples = n;
    }
    if let Some(o) = cli.output {
        cfg.output = o;
    }

    match run_experiment(&cfg) {
        Ok(report) => {
            for f in &report.files {
                println!("{}", f.display());
            }
            if report.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                for f in &report.failures {
                    eprintln!("job failed: {f}");
                }
                ExitCode::from(3)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
