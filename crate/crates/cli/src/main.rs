//! `sda`: generate Lorenz data, train a local score network, and assimilate
//! observations with it, next to a particle-filter reference.
//!
//! Exit codes: 0 success, 2 invalid configuration or input, 3 numerical
//! failure, 4 I/O.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::commands::Experiment;
use crate::config::{load_file, parse_override, ExperimentConfig, Variant};
use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "sda", version, about = "Score-based data assimilation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed; every random sub-task derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Experiment directory that config paths are relative to. Defaults to the
    /// directory of the config file, or the working directory without one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override a config key, e.g. `--set training.epochs=64`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Default)]
struct SamplerFlags {
    /// Predictor steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Langevin corrector steps after every predictor step.
    #[arg(long)]
    corrections: Option<usize>,
    /// Langevin step scale.
    #[arg(long)]
    tau: Option<f64>,
    /// Number of trajectories to draw.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate and standardize a trajectory dataset.
    Generate,
    /// Train the local score network.
    Train {
        /// Continue from the saved training state.
        #[arg(long)]
        resume: bool,
    },
    /// Observe a held-out trajectory through the configured operator.
    Observe,
    /// Draw unconditional trajectories from the trained prior.
    Sample {
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Draw posterior trajectories given the observation.
    Assimilate {
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        /// Output ensemble, relative to the experiment directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Draw reference posterior trajectories with the bootstrap particle filter.
    Bpf {
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Summary statistics and pairwise W₁ distances of ensembles.
    Evaluate {
        /// Ensemble files (relative to the working directory).
        #[arg(required = true)]
        ensembles: Vec<PathBuf>,
        /// Report path without extension, relative to the experiment directory.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn json_path(p: &std::path::Path) -> Value {
    Value::String(p.display().to_string())
}

impl Command {
    /// Flag values as config overrides, applied after `--set`.
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut o = Vec::new();
        let sampler = |s: &SamplerFlags, o: &mut Vec<(String, Value)>| {
            if let Some(v) = s.steps {
                o.push(("sampler.steps".into(), v.into()));
            }
            if let Some(v) = s.corrections {
                o.push(("sampler.corrections".into(), v.into()));
            }
            if let Some(v) = s.tau {
                o.push(("sampler.tau".into(), v.into()));
            }
            if let Some(v) = s.samples {
                o.push(("sampler.samples".into(), v.into()));
            }
        };
        match self {
            Command::Sample { sampler: s } => sampler(s, &mut o),
            Command::Assimilate {
                sampler: s,
                variant,
                output,
            } => {
                sampler(s, &mut o);
                if let Some(v) = variant {
                    o.push(("guidance.variant".into(), serde_json::to_value(v).expect("enum")));
                }
                if let Some(p) = output {
                    o.push(("sampler.output".into(), json_path(p)));
                }
            }
            Command::Bpf { particles, output } => {
                if let Some(v) = particles {
                    o.push(("bpf.particles".into(), (*v).into()));
                }
                if let Some(p) = output {
                    o.push(("bpf.output".into(), json_path(p)));
                }
            }
            Command::Evaluate {
                report: Some(p), ..
            } => o.push(("evaluation.report".into(), json_path(p))),
            _ => {}
        }
        o
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let file = cli.config.as_deref().map(load_file).transpose()?;
    let mut overrides = cli
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.into()));
    }
    overrides.extend(cli.command.overrides());
    let (config, value) = ExperimentConfig::layered(file, &overrides)?;
    let dir = match (&cli.out, &cli.config) {
        (Some(out), _) => out.clone(),
        (None, Some(c)) => c.parent().map(PathBuf::from).unwrap_or_default(),
        (None, None) => PathBuf::from("."),
    };
    let exp = Experiment { config, value, dir };
    match &cli.command {
        Command::Generate => commands::generate(&exp),
        Command::Train { resume } => commands::train(&exp, *resume),
        Command::Observe => commands::observe(&exp),
        Command::Sample { .. } => commands::sample_prior(&exp),
        Command::Assimilate { .. } => commands::assimilate(&exp),
        Command::Bpf { .. } => commands::bpf(&exp),
        Command::Evaluate { ensembles, .. } => commands::evaluate(&exp, ensembles),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sda: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
