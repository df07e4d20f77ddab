//! Stochastic gradient ascent on a bound over model and proposal
//! parameters, with Adam, validation-based early stopping and a learning
//! rate grid search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::kl_q_prior;
use crate::error::{usage, Error, Result};
use crate::gradients::{
    grad_fivo_full, grad_iwae_reparam, grad_log_phat_reparam, grad_score_function, GradientEstimate, GradientVariant,
    MovingAverageBaseline,
};
use crate::models::{Proposal, SequentialModel};
use crate::numerics::{serde_float, stream_role, RngStream};
use crate::objectives::ObjectiveSpec;
use crate::smc::{run_particle_filter, ResamplingPolicy};

pub const LR_GRID: [f64; 4] = [3e-4, 1e-4, 3e-5, 1e-5];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam for maximization.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(config: AdamConfig, dim: usize) -> Self {
        Self {
            config,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for k in 0..params.len() {
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * grad[k];
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * grad[k] * grad[k];
            params[k] += lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + epsilon);
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `elbo`, `iwae` or `fivo`.
    pub objective: ObjectiveSpec,
    #[serde(default = "default_variant")]
    pub variant: GradientVariant,
    pub learning_rate: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_one")]
    pub batch_size: usize,
    pub max_steps: usize,
    /// Validate every this many steps; 0 disables validation.
    #[serde(default)]
    pub validation_every: usize,
    /// Stop after this many validations without improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Replicates per validation sequence.
    #[serde(default = "default_one")]
    pub validation_replicates: usize,
    #[serde(default = "default_true")]
    pub train_model: bool,
    #[serde(default = "default_true")]
    pub train_proposal: bool,
    /// Moving-average baseline decay for score-function gradients.
    #[serde(default)]
    pub baseline_decay: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_variant() -> GradientVariant {
    GradientVariant::ReparamBiased
}

impl TrainConfig {
    pub fn new(objective: ObjectiveSpec, learning_rate: f64, max_steps: usize, seed: u64) -> Self {
        Self {
            objective,
            variant: GradientVariant::ReparamBiased,
            learning_rate,
            adam: AdamConfig::default(),
            batch_size: 1,
            max_steps,
            validation_every: 0,
            patience: None,
            validation_replicates: 1,
            train_model: true,
            train_proposal: true,
            baseline_decay: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        match &self.objective {
            ObjectiveSpec::Elbo { .. } | ObjectiveSpec::Iwae { .. } => {}
            ObjectiveSpec::Fivo { policy, .. } => {
                if self.variant != GradientVariant::ReparamBiased && !policy.is_fixed() {
                    return usage(format!(
                        "gradient variant {} needs a fixed resampling schedule",
                        self.variant.name()
                    ));
                }
            }
            other => return usage(format!("training supports elbo, iwae and fivo, not {}", other.name())),
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return usage(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 || self.validation_replicates == 0 {
            return usage("batch size and validation replicates must be at least 1");
        }
        if let Some(d) = self.baseline_decay {
            MovingAverageBaseline::new(d)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(with = "serde_float")]
    pub objective: f64,
    #[serde(with = "serde_float")]
    pub grad_norm_theta: f64,
    #[serde(with = "serde_float")]
    pub grad_norm_phi: f64,
    #[serde(with = "serde_float")]
    pub kl_q_prior: f64,
    pub resample_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationLog {
    pub step: usize,
    #[serde(with = "serde_float")]
    pub bound: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepLog>,
    pub validations: Vec<ValidationLog>,
    /// Step whose parameters were returned.
    pub best_step: usize,
    pub best_validation: Option<f64>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,objective,grad_norm_theta,grad_norm_phi,kl_q_prior,resample_count\n");
        for r in &self.steps {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.objective, r.grad_norm_theta, r.grad_norm_phi, r.kl_q_prior, r.resample_count
            ));
        }
        s
    }

    pub fn validation_csv(&self) -> String {
        let mut s = String::from("step,bound\n");
        for r in &self.validations {
            s.push_str(&format!("{},{}\n", r.step, r.bound));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M, P> {
    pub model: M,
    pub proposal: P,
    pub history: TrainHistory,
}

/// One gradient estimate for one sequence and the number of resampling
/// events behind it.
fn sequence_gradient<M: SequentialModel, P: Proposal<M>>(
    config: &TrainConfig,
    model: &M,
    proposal: &P,
    x: &[f64],
    rng: &RngStream,
    baseline: Option<&mut MovingAverageBaseline>,
) -> Result<(GradientEstimate, usize)> {
    let (n, policy) = match &config.objective {
        ObjectiveSpec::Elbo { samples } => {
            if config.variant != GradientVariant::ScoreFunction {
                let mut acc: Option<GradientEstimate> = None;
                for s in 0..*samples as u64 {
                    let stream = if *samples == 1 {
                        rng.clone()
                    } else {
                        rng.derive(stream_role::AUX, s)
                    };
                    let g = grad_iwae_reparam(model, proposal, x, 1, &stream)?;
                    acc = Some(match acc {
                        None => g,
                        Some(mut a) => {
                            add_into(&mut a, &g);
                            a
                        }
                    });
                }
                let mut g = acc.expect("at least one sample");
                scale(&mut g, 1.0 / *samples as f64);
                return Ok((g, 0));
            }
            (1, ResamplingPolicy::Never)
        }
        ObjectiveSpec::Iwae { n_particles } => {
            if config.variant != GradientVariant::ScoreFunction {
                return Ok((grad_iwae_reparam(model, proposal, x, *n_particles, rng)?, 0));
            }
            (*n_particles, ResamplingPolicy::Never)
        }
        ObjectiveSpec::Fivo {
            n_particles, policy, ..
        } => (*n_particles, policy.clone()),
        other => return usage(format!("cannot train on {}", other.name())),
    };
    let record = run_particle_filter(model, proposal, x, n, &policy, rng)?;
    let count = record.resampling_steps().len();
    let g = match config.variant {
        GradientVariant::ReparamBiased => grad_log_phat_reparam(&record, model, proposal, x)?,
        GradientVariant::ReparamFull => grad_fivo_full(&record, model, proposal, x)?,
        GradientVariant::ScoreFunction => grad_score_function(&record, model, proposal, x, baseline)?,
    };
    Ok((g, count))
}

fn add_into(a: &mut GradientEstimate, b: &GradientEstimate) {
    a.d_theta.iter_mut().zip(&b.d_theta).for_each(|(x, y)| *x += y);
    a.d_phi.iter_mut().zip(&b.d_phi).for_each(|(x, y)| *x += y);
    a.log_phat += b.log_phat;
}

fn scale(a: &mut GradientEstimate, s: f64) {
    a.d_theta.iter_mut().for_each(|x| *x *= s);
    a.d_phi.iter_mut().for_each(|x| *x *= s);
    a.log_phat *= s;
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Mean validation bound under the training objective, on fixed streams.
pub fn validation_bound<M: SequentialModel, P: Proposal<M>>(
    objective: &ObjectiveSpec,
    model: &M,
    proposal: &P,
    data: &[Vec<f64>],
    replicates: usize,
    rng: &RngStream,
) -> Result<f64> {
    let values: Vec<f64> = data
        .par_iter()
        .enumerate()
        .map(|(k, x)| {
            let base = rng.derive(stream_role::VALIDATION, k as u64);
            let mut total = 0.0;
            for r in 0..replicates as u64 {
                total += objective.estimate(model, proposal, x, &base.replicate(r))?;
            }
            Ok(total / replicates as f64)
        })
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Adam ascent on the configured bound. With validation enabled the
/// parameters of the best validation step are returned.
pub fn train<M: SequentialModel, P: Proposal<M>>(
    model: &M,
    proposal: &P,
    train_data: &[Vec<f64>],
    validation_data: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<TrainOutcome<M, P>> {
    config.validate()?;
    if train_data.is_empty() {
        return usage("training set is empty");
    }
    if config.validation_every > 0 && validation_data.is_empty() {
        return usage("validation is enabled but the validation set is empty");
    }
    let root = RngStream::new(config.seed, 0);
    let mut theta = model.params();
    let mut phi = proposal.params();
    let nt = theta.len();
    let mut adam = Adam::new(config.adam, nt + phi.len());
    let mut baseline = match (config.variant, config.baseline_decay) {
        (GradientVariant::ScoreFunction, Some(d)) => Some(MovingAverageBaseline::new(d)?),
        _ => None,
    };
    let mut history = TrainHistory::default();
    let mut current = (model.clone(), proposal.clone());
    let mut best = current.clone();
    let mut since_best = 0;

    let validate = |step: usize, m: &M, q: &P, history: &mut TrainHistory| -> Result<bool> {
        let bound = validation_bound(
            &config.objective,
            m,
            q,
            validation_data,
            config.validation_replicates,
            &root,
        )?;
        history.validations.push(ValidationLog { step, bound });
        let improved = history.best_validation.is_none_or(|b| bound > b);
        if improved {
            history.best_validation = Some(bound);
            history.best_step = step;
        }
        Ok(improved)
    };

    if config.validation_every > 0 {
        validate(0, &current.0, &current.1, &mut history)?;
    }
    for step in 1..=config.max_steps {
        let (m, q) = &current;
        let mut batch_rng = root.derive(stream_role::BATCH, step as u64);
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| batch_rng.below(train_data.len()))
            .collect();
        let streams: Vec<RngStream> = (0..config.batch_size)
            .map(|b| root.derive(stream_role::REPLICATE, (step * config.batch_size + b) as u64))
            .collect();
        let results: Vec<(GradientEstimate, usize)> = if baseline.is_some() {
            // The baseline carries state across sequences; keep it sequential.
            let mut out = Vec::with_capacity(batch.len());
            for (&k, s) in batch.iter().zip(&streams) {
                out.push(sequence_gradient(config, m, q, &train_data[k], s, baseline.as_mut())?);
            }
            out
        } else {
            batch
                .par_iter()
                .zip(&streams)
                .map(|(&k, s)| sequence_gradient(config, m, q, &train_data[k], s, None))
                .collect::<Result<_>>()?
        };
        let mut grad = vec![0.0; adam.m.len()];
        let mut objective = 0.0;
        let mut resamples = 0;
        for (g, c) in &results {
            for (acc, v) in grad.iter_mut().zip(g.d_theta.iter().chain(&g.d_phi)) {
                *acc += v / config.batch_size as f64;
            }
            objective += g.log_phat / config.batch_size as f64;
            resamples += c;
        }
        if !config.train_model {
            grad[..nt].iter_mut().for_each(|g| *g = 0.0);
        }
        if !config.train_proposal {
            grad[nt..].iter_mut().for_each(|g| *g = 0.0);
        }
        let kl = kl_q_prior(
            m,
            q,
            &train_data[batch[0]],
            1,
            &root.derive(stream_role::AUX, step as u64),
        )?;
        history.steps.push(StepLog {
            step,
            objective,
            grad_norm_theta: norm(&grad[..nt]),
            grad_norm_phi: norm(&grad[nt..]),
            kl_q_prior: kl,
            resample_count: resamples,
        });
        if !objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                history: Box::new(history),
            });
        }
        let mut params: Vec<f64> = theta.iter().chain(&phi).copied().collect();
        adam.step(&mut params, &grad, config.learning_rate);
        theta.copy_from_slice(&params[..nt]);
        phi.copy_from_slice(&params[nt..]);
        current = match (model.with_params(&theta), proposal.with_params(&phi)) {
            (Ok(m), Ok(q)) => (m, q),
            _ => {
                return Err(Error::Divergence {
                    step,
                    history: Box::new(history),
                })
            }
        };
        if config.validation_every > 0 && step % config.validation_every == 0 {
            if validate(step, &current.0, &current.1, &mut history)? {
                best = current.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if config.patience.is_some_and(|p| since_best >= p) {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    let (model, proposal) = if config.validation_every > 0 {
        best
    } else {
        history.best_step = history.steps.len();
        current
    };
    Ok(TrainOutcome {
        model,
        proposal,
        history,
    })
}

#[derive(Clone, Debug)]
pub struct GridRun<M, P> {
    pub learning_rate: f64,
    /// Best validation bound, or `-∞` for a run that diverged.
    pub validation: f64,
    pub outcome: std::result::Result<TrainOutcome<M, P>, String>,
}

#[derive(Clone, Debug)]
pub struct GridSearch<M, P> {
    pub runs: Vec<GridRun<M, P>>,
    pub selected: usize,
}

/// Train once per learning rate and select the run with the best
/// validation bound. Ties go to the earlier grid entry.
pub fn lr_grid_search<M: SequentialModel, P: Proposal<M>>(
    model: &M,
    proposal: &P,
    train_data: &[Vec<f64>],
    validation_data: &[Vec<f64>],
    config: &TrainConfig,
    grid: &[f64],
) -> Result<GridSearch<M, P>> {
    if grid.is_empty() {
        return usage("learning-rate grid is empty");
    }
    if config.validation_every == 0 {
        return usage("grid search selects by validation; set validation_every");
    }
    let runs: Vec<GridRun<M, P>> = grid
        .iter()
        .map(|&lr| {
            let cfg = TrainConfig {
                learning_rate: lr,
                ..config.clone()
            };
            match train(model, proposal, train_data, validation_data, &cfg) {
                Ok(o) => Ok(GridRun {
                    learning_rate: lr,
                    validation: o.history.best_validation.unwrap_or(f64::NEG_INFINITY),
                    outcome: Ok(o),
                }),
                Err(e @ Error::Divergence { .. }) => Ok(GridRun {
                    learning_rate: lr,
                    validation: f64::NEG_INFINITY,
                    outcome: Err(e.to_string()),
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut selected = 0;
    for (k, r) in runs.iter().enumerate() {
        if r.validation > runs[selected].validation {
            selected = k;
        }
    }
    Ok(GridSearch { runs, selected })
}
