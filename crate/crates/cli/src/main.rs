//! `histdiff` — train, sample, roll out, interpolate, sweep, verify and
//! serve from one TOML experiment config.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use histdiff_harness::experiment::{
    run_interpolate, run_oracle_verify, run_rollout, run_sample, run_sweeps, run_train,
};
use histdiff_harness::ExperimentConfig;
use histdiff_service::{AppState, ModelEntry};

#[derive(Parser)]
#[command(name = "histdiff", version, about = "History-guided sequence diffusion on toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); omitted means all defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the training, sampler and evaluation seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `model.checkpoint` (tiny model).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory; defaults to `runs/<command>`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or fine-tune) the tiny denoiser; writes checkpoint.bin and the loss curve.
    Train(Common),
    /// Draw samples for the `[sample]` task; writes samples.tensor/csv and metrics.
    Sample(Common),
    /// Steered rollouts per `[rollout]`; writes sequences, norms and metrics.
    Rollout(Common),
    /// Densify a dataset sequence per `[interpolate]`.
    Interpolate(Common),
    /// Run the `[sweep]`, `[flexibility]` and `[ood]` sections present.
    Sweep(Common),
    /// Check the closed-form oracles; exits non-zero on any failure.
    OracleVerify(Common),
    /// Serve the JSON rollout API for the configured model.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Overrides `serve.port`.
        #[arg(long)]
        port: Option<u16>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.apply_seed(seed);
    }
    if let Some(path) = &common.checkpoint {
        cfg.set_checkpoint(path.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, name: &str) -> PathBuf {
    common.out_dir.clone().unwrap_or_else(|| Path::new("runs").join(name))
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    type Driver = fn(&ExperimentConfig, &Path) -> Result<Vec<PathBuf>, histdiff_harness::HarnessError>;
    let (common, name, driver): (&Common, &str, Driver) = match &cli.command {
        Command::Train(c) => (c, "train", run_train),
        Command::Sample(c) => (c, "sample", run_sample),
        Command::Rollout(c) => (c, "rollout", run_rollout),
        Command::Interpolate(c) => (c, "interpolate", run_interpolate),
        Command::Sweep(c) => (c, "sweep", run_sweeps),
        Command::OracleVerify(c) => {
            let cfg = load(c)?;
            let (checks, paths) = run_oracle_verify(&cfg, &out_dir(c, "oracle-verify"))?;
            for check in &checks {
                println!("{} {}: {}", if check.passed { "PASS" } else { "FAIL" }, check.name, check.detail);
            }
            report(&paths);
            let all = checks.iter().all(|c| c.passed);
            return Ok(if all { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::Serve { common, port } => {
            let cfg = load(common)?;
            let entry = ModelEntry::from_config(&cfg)?;
            let addr = SocketAddr::from(([0, 0, 0, 0], port.unwrap_or(cfg.serve.port)));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(histdiff_service::serve(AppState::new(vec![entry]), addr))?;
            return Ok(ExitCode::SUCCESS);
        }
    };
    let cfg = load(common)?;
    let paths = driver(&cfg, &out_dir(common, name))?;
    report(&paths);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
