mod commands;
mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fivo_core::verify::parse_suites;

use crate::commands::{execute, exit_code, replay, Job, Outcome};
use crate::config::{config_error, parse, VerifyConfig};

/// Estimate, verify and train Monte Carlo objectives on sequential
/// latent-variable models.
#[derive(Parser)]
#[command(name = "fivo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replicated bound estimates, one CSV row per (objective, N).
    Estimate(RunArgs),
    /// Run verification suites; exits nonzero if any assertion fails.
    Verify(VerifyArgs),
    /// Train a model and proposal by stochastic gradient ascent.
    Train(RunArgs),
    /// Train once per learning rate and select by validation bound.
    Sweep(RunArgs),
    /// Re-run a recorded run from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct Common {
    /// Root directory for run directories.
    #[arg(long, env = "FIVO_OUT", default_value = "runs")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses all cores. Outputs do not depend on it.
    #[arg(long, env = "FIVO_JOBS", default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated suite names, or `all`; overrides the config's list.
    #[arg(long)]
    suite: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ReplayArgs {
    /// Path to a run's manifest.json.
    #[arg(long)]
    manifest: PathBuf,
    /// Root for the new run directory; defaults to the original run's root.
    #[arg(long, env = "FIVO_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "FIVO_JOBS", default_value_t = 0)]
    jobs: usize,
}

fn read_config(path: &Path) -> Result<(String, PathBuf)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error("--config", format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if base.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        base
    };
    let base = base
        .canonicalize()
        .with_context(|| format!("resolving {}", base.display()))?;
    Ok((text, base))
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    Ok(pool.install(f))
}

fn run(cli: Cli) -> Result<Outcome> {
    let (command, a) = match cli.command {
        Command::Estimate(a) => ("estimate", a),
        Command::Train(a) => ("train", a),
        Command::Sweep(a) => ("sweep", a),
        Command::Verify(a) => {
            let mut cfg: VerifyConfig = match &a.config {
                Some(p) => parse(&read_config(p)?.0)?,
                None => VerifyConfig::default(),
            };
            if let Some(s) = &a.suite {
                cfg.suites = parse_suites(s).map_err(|e| config_error("--suite", e))?;
            }
            cfg.resolve()?;
            let job = Job::Verify(cfg);
            let c = a.common;
            return in_pool(c.jobs, || execute(&job, &c.out, c.seed, c.jobs, None))?;
        }
        Command::Replay(a) => return in_pool(a.jobs, || replay(&a.manifest, a.out.as_deref(), a.jobs))?,
    };
    let (text, base) = read_config(&a.config)?;
    let c = a.common;
    let job = Job::from_text(command, &text, &base, c.seed)?;
    in_pool(c.jobs, || execute(&job, &c.out, c.seed, c.jobs, None))?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            println!("run directory: {}", outcome.dir.display());
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
