use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cpdiff_core::config::{AblationAxis, ExperimentConfig};
use cpdiff_core::pipeline::{AnalysisKind, Pipeline, RunManifest, StageId, StageStatus};
use cpdiff_core::Error;

const DEFAULT_CONFIG: &str = include_str!("../configs/default.cfg");

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "cpdiff",
    version,
    about = "Conditional latent diffusion over LoRA adapter weights"
)]
struct Cli {
    /// Experiment config (TOML). Defaults to the bundled blobs suite.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for independent harvests, candidate sampling and ablation levels.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Reruns stages even when their artifacts are up to date.
    #[arg(long, global = true)]
    force: bool,

    #[arg(long, global = true, env = "CPDIFF_OUT", default_value = "cpdiff-out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the base network and harvest LoRA checkpoints for every trained task.
    Harvest,
    /// Normalize the checkpoints and train the parameter autoencoder.
    TrainAe,
    /// Train the conditional denoiser on autoencoder latents.
    TrainDiff,
    /// Sample adapters for every suite condition and write generation reports.
    Generate {
        /// Candidates per condition (overrides the config).
        #[arg(long)]
        m: Option<usize>,
    },
    /// Run one pipeline per level of the given axes (all axes when none are given).
    Ablate {
        #[arg(long = "axis")]
        axes: Vec<AblationAxis>,
    },
    /// Similarity, interpolation, PCA and trajectory exports (all when none are given).
    Analyze { kinds: Vec<AnalysisKind> },
    /// Every stage from harvest to analysis.
    Pipeline,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Stage { source, .. } => exit_code(source),
        Error::Config(_) => EXIT_CONFIG,
        Error::BadMagic { .. }
        | Error::Version { .. }
        | Error::Truncated(_)
        | Error::Checksum { .. }
        | Error::Header(_)
        | Error::StaleArtifact { .. } => EXIT_VERIFY,
        _ => EXIT_STAGE,
    }
}

fn revision() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::from_toml(DEFAULT_CONFIG)?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Command::Generate { m: Some(m) } = cli.command {
        cfg.generation.m = m;
    }
    cfg.validate()?;
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    Ok(cfg)
}

fn print_manifest(m: &RunManifest) {
    for r in &m.stages {
        let status = match r.status {
            StageStatus::Ran => "ran",
            StageStatus::Cached => "cached",
            StageStatus::Failed => "FAILED",
        };
        println!("{:<11} {:<7} {:>8.1}s", r.stage.name(), status, r.seconds);
        if let Some(e) = &r.error {
            println!("  {e}");
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut p = Pipeline::new(cfg, &cli.out);
    p.force = cli.force;
    p.revision = revision();
    eprintln!("config {} -> {}", &p.cfg.hash()[..16], cli.out.display());
    let stages: &[StageId] = match &cli.command {
        Command::Harvest => &[StageId::Harvest],
        Command::TrainAe => &[StageId::TrainAe],
        Command::TrainDiff => &[StageId::TrainDiff],
        Command::Generate { .. } => &[StageId::Generate],
        Command::Analyze { kinds } => {
            if !kinds.is_empty() {
                p.analyses = Some(kinds.clone());
            }
            &[StageId::Analyze]
        }
        Command::Pipeline => &StageId::ALL,
        Command::Ablate { axes } => {
            let axes = if axes.is_empty() {
                AblationAxis::ALL.to_vec()
            } else {
                axes.clone()
            };
            let mut failed = 0;
            for axis in axes {
                let grid = p.ablate(axis)?;
                for run in &grid.runs {
                    let mean = if run.reports.is_empty() {
                        f64::NAN
                    } else {
                        run.reports.iter().map(|r| r.chosen_val).sum::<f64>()
                            / run.reports.len() as f64
                    };
                    match &run.error {
                        None => println!(
                            "{:<15} {:<26} mean chosen val {mean:.4}",
                            axis.name(),
                            run.level.to_string()
                        ),
                        Some(e) => {
                            failed += 1;
                            println!(
                                "{:<15} {:<26} FAILED: {e}",
                                axis.name(),
                                run.level.to_string()
                            );
                        }
                    }
                }
            }
            return if failed > 0 {
                Err(Error::Stage {
                    stage: "ablate",
                    source: Box::new(Error::InvalidArgument(format!("{failed} level(s) failed"))),
                })
            } else {
                Ok(())
            };
        }
    };
    let result = p.run(stages);
    if let Some(m) = p.load_manifest() {
        print_manifest(&m);
    }
    result.map(|_| ())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
