//! Subcommand bodies. Each run resolves its config, stores it in a fresh
//! run directory, writes its outputs and finishes with a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use fivo_core::models::{AnyModel, AnyProposal};
use fivo_core::numerics::stream_role;
use fivo_core::objectives::estimate_bound;
use fivo_core::trainer::{lr_grid_search, train, TrainHistory, TrainOutcome};
use fivo_core::verify::{run_suite, SuiteOptions, SuiteReport};
use fivo_core::{Error, RngStream};
use serde_json::json;

use crate::config::{config_error, parse, ConfigError, EstimateConfig, SweepConfig, TrainRunConfig, VerifyConfig};
use crate::run::{digest_label, versioned_csv, RunDir, RunManifest, CSV_FORMAT_VERSION};

pub const ESTIMATE_HEADER: &str = "format_version,objective,N,policy,mean,se,replicates,seed";

/// Exit codes beyond 0 (success) and 1 (other failures).
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_COLLAPSE: i32 = 3;
pub const EXIT_TRAINING_ABORT: i32 = 4;
/// A verification suite ran and at least one assertion failed.
pub const EXIT_VERIFY_FAILED: i32 = 1;

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Usage(_) | Error::Domain(_) | Error::Unsupported(_) | Error::Json(_) => EXIT_USAGE,
                Error::Collapse { .. } | Error::DegenerateWeights => EXIT_COLLAPSE,
                Error::Divergence { .. } => EXIT_TRAINING_ABORT,
                Error::Io(_) => 1,
            };
        }
    }
    1
}

/// A fully resolved run description.
#[derive(Clone, Debug)]
pub enum Job {
    Estimate(EstimateConfig),
    Verify(VerifyConfig),
    Train(TrainRunConfig),
    Sweep(SweepConfig),
}

impl Job {
    pub fn command(&self) -> &'static str {
        match self {
            Job::Estimate(_) => "estimate",
            Job::Verify(_) => "verify",
            Job::Train(_) => "train",
            Job::Sweep(_) => "sweep",
        }
    }

    /// Parse and resolve a config for `command`. Relative data paths are
    /// taken relative to `base`; the training seed is set to `seed`.
    pub fn from_text(command: &str, text: &str, base: &Path, seed: u64) -> Result<Job> {
        match command {
            "estimate" => {
                let mut c: EstimateConfig = parse(text)?;
                c.resolve(base)?;
                Ok(Job::Estimate(c))
            }
            "verify" => {
                let mut c: VerifyConfig = parse(text)?;
                c.resolve()?;
                Ok(Job::Verify(c))
            }
            "train" => {
                let mut c: TrainRunConfig = parse(text)?;
                c.train.seed = seed;
                c.resolve(base)?;
                Ok(Job::Train(c))
            }
            "sweep" => {
                let mut c = SweepConfig::parse(text)?;
                c.train.seed = seed;
                c.resolve(base)?;
                Ok(Job::Sweep(c))
            }
            other => Err(ConfigError(format!("unknown command `{other}`")).into()),
        }
    }

    pub fn config_bytes(&self) -> Vec<u8> {
        let value = match self {
            Job::Estimate(c) => serde_json::to_value(c),
            Job::Verify(c) => serde_json::to_value(c),
            Job::Train(c) => serde_json::to_value(c),
            Job::Sweep(c) => serde_json::to_value(c),
        }
        .expect("configs serialize");
        let mut bytes = serde_json::to_vec_pretty(&value).expect("values serialize");
        bytes.push(b'\n');
        bytes
    }

    fn input_file(&self) -> Option<&Path> {
        match self {
            Job::Estimate(c) => c.data.input_file(),
            Job::Verify(_) => None,
            Job::Train(c) => c.data.input_file(),
            Job::Sweep(c) => c.data.input_file(),
        }
    }
}

pub struct Outcome {
    pub dir: PathBuf,
    pub exit_code: i32,
}

/// Run `job` in a new directory under `out`. A failing run still leaves
/// its manifest, with the exit code it ended with.
pub fn execute(job: &Job, out: &Path, seed: u64, jobs: usize, replay_of: Option<String>) -> Result<Outcome> {
    let mut run = RunDir::create(out, job.command(), &job.config_bytes(), seed, jobs)?;
    run.replay_of = replay_of;
    if let Some(p) = job.input_file() {
        if let Err(e) = run.add_input(p) {
            run.finish(EXIT_USAGE)?;
            return Err(config_error("data.path", format!("{e:#}")));
        }
    }
    let result = match job {
        Job::Estimate(c) => estimate(c, seed, &mut run),
        Job::Verify(c) => verify(c, seed, &mut run),
        Job::Train(c) => train_run(c, &mut run),
        Job::Sweep(c) => sweep(c, seed, jobs, &mut run),
    };
    match result {
        Ok(code) => {
            let dir = run.finish(code)?;
            Ok(Outcome { dir, exit_code: code })
        }
        Err(e) => {
            let dir = run.finish(exit_code(&e))?;
            Err(e.context(format!("run directory {}", dir.display())))
        }
    }
}

fn estimate(c: &EstimateConfig, seed: u64, run: &mut RunDir) -> Result<i32> {
    let x = c.data.load(&c.model)?;
    let root = RngStream::new(seed, 0);
    let mut csv = format!("{ESTIMATE_HEADER}\n");
    for (k, spec) in c.cells().iter().enumerate() {
        let stream = root.derive(stream_role::REPLICATE, k as u64);
        let est = estimate_bound(spec, &c.model, &c.proposal, &x, c.replicates, &stream)?;
        log::info!(
            "{} N={} mean {} se {}",
            est.objective,
            est.n_particles,
            est.mean,
            est.std_error
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            CSV_FORMAT_VERSION,
            est.objective,
            est.n_particles,
            est.policy.as_deref().unwrap_or("none"),
            est.mean,
            est.std_error,
            est.replicates,
            seed
        ));
    }
    print!("{csv}");
    run.write("estimate.csv", csv)?;
    Ok(0)
}

fn verify(c: &VerifyConfig, seed: u64, run: &mut RunDir) -> Result<i32> {
    let opts = SuiteOptions {
        scale: c.scale,
        fault: c.fault,
    };
    let mut csv = format!("{}\n", SuiteReport::csv_header());
    let mut passed = true;
    for &suite in &c.suites {
        let report = run_suite(suite, &opts, seed)?;
        for a in &report.assertions {
            println!(
                "{} [{}] {}: measured {:.4e} threshold {:.4e}{}",
                if a.passed { "PASS" } else { "FAIL" },
                suite,
                a.name,
                a.measured,
                a.threshold,
                a.note.as_ref().map(|n| format!(" ({n})")).unwrap_or_default()
            );
        }
        passed &= report.passed();
        csv.push_str(&report.csv_rows());
    }
    run.write("report.csv", versioned_csv(&csv))?;
    Ok(if passed { 0 } else { EXIT_VERIFY_FAILED })
}

fn write_history(run: &mut RunDir, history: &TrainHistory) -> Result<()> {
    run.write("steps.csv", versioned_csv(&history.steps_csv()))?;
    run.write("validation.csv", versioned_csv(&history.validation_csv()))?;
    Ok(())
}

fn write_outcome(run: &mut RunDir, outcome: &TrainOutcome<AnyModel, AnyProposal>) -> Result<()> {
    write_history(run, &outcome.history)?;
    let checkpoint = json!({
        "model": outcome.model,
        "proposal": outcome.proposal,
        "best_step": outcome.history.best_step,
        "best_validation": outcome.history.best_validation,
        "stopped_early": outcome.history.stopped_early,
    });
    let mut bytes = serde_json::to_vec_pretty(&checkpoint)?;
    bytes.push(b'\n');
    run.write("checkpoint.json", bytes)?;
    Ok(())
}

fn train_run(c: &TrainRunConfig, run: &mut RunDir) -> Result<i32> {
    let data = c.data.load(&c.model)?;
    match train(&c.model, &c.proposal, &data.train, &data.validation, &c.train) {
        Ok(outcome) => {
            write_outcome(run, &outcome)?;
            println!(
                "best step {} validation {:?}",
                outcome.history.best_step, outcome.history.best_validation
            );
            Ok(0)
        }
        Err(Error::Divergence { step, history }) => {
            write_history(run, &history)?;
            Err(Error::Divergence { step, history }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn sweep(c: &SweepConfig, seed: u64, jobs: usize, run: &mut RunDir) -> Result<i32> {
    let data = c.data.load(&c.model)?;
    let search = lr_grid_search(
        &c.model,
        &c.proposal,
        &data.train,
        &data.validation,
        &c.train,
        &c.learning_rates,
    )?;
    let mut cells = Vec::new();
    for (k, r) in search.runs.iter().enumerate() {
        let selected = k == search.selected && r.outcome.is_ok();
        let cell = Job::Train(c.cell(r.learning_rate));
        let mut sub = RunDir::create(&run.path, "train", &cell.config_bytes(), seed, jobs)?;
        if let Some(p) = cell.input_file() {
            sub.add_input(p)?;
        }
        sub.details.insert("learning_rate".into(), json!(r.learning_rate));
        sub.details.insert("selected".into(), json!(selected));
        let code = match &r.outcome {
            Ok(outcome) => {
                write_outcome(&mut sub, outcome)?;
                0
            }
            Err(msg) => {
                sub.details.insert("error".into(), json!(msg));
                EXIT_TRAINING_ABORT
            }
        };
        let dir = sub.finish(code)?;
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        println!(
            "lr {} validation {}{}",
            r.learning_rate,
            r.validation,
            if selected { " (selected)" } else { "" }
        );
        cells.push(json!({
            "learning_rate": r.learning_rate,
            "validation": r.validation.is_finite().then_some(r.validation),
            "status": if r.outcome.is_ok() { "ok" } else { "diverged" },
            "selected": selected,
            "run_dir": name,
        }));
    }
    let chosen = &search.runs[search.selected];
    let summary = json!({
        "selected_learning_rate": chosen.outcome.is_ok().then_some(chosen.learning_rate),
        "runs": cells,
    });
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    run.write("summary.json", bytes)?;
    Ok(if chosen.outcome.is_ok() { 0 } else { EXIT_TRAINING_ABORT })
}

/// Re-run the command recorded in a manifest with its stored config and
/// seed. Outputs go to a new directory under `out`, or next to the
/// original run.
pub fn replay(manifest_path: &Path, out: Option<&Path>, jobs: usize) -> Result<Outcome> {
    let manifest = RunManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let config_path = dir.join(&manifest.config_file);
    let text =
        fs::read(&config_path).map_err(|e| config_error("config_file", format!("{}: {e}", config_path.display())))?;
    if digest_label(&text) != manifest.config_digest {
        return Err(config_error(
            "config_digest",
            "stored config does not match the manifest digest",
        ));
    }
    let text = String::from_utf8(text).map_err(|e| config_error("config_file", e))?;
    let job = Job::from_text(&manifest.command, &text, dir, manifest.seed)?;
    if job.config_bytes() != text.as_bytes() {
        return Err(anyhow!(
            "stored config does not re-resolve to itself; it was written by a different version"
        ));
    }
    for input in &manifest.inputs {
        let bytes = fs::read(&input.path).map_err(|e| config_error("inputs", format!("{}: {e}", input.path)))?;
        if crate::run::sha256_hex(&bytes) != input.sha256 {
            return Err(config_error(
                "inputs",
                format!("{} changed since the original run", input.path),
            ));
        }
    }
    let root = match out {
        Some(o) => o.to_path_buf(),
        None => dir.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    execute(
        &job,
        &root,
        manifest.seed,
        jobs,
        Some(manifest_path.display().to_string()),
    )
}
