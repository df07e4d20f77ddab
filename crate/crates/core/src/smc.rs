//! The particle filter: propose, weight, resample, accumulate `log p̂`.
//!
//! Randomness follows a fixed layout. Particle `i` draws its proposal noise
//! from `rng.derive(PROPOSAL, i)` and all resampling draws come from
//! `rng.derive(RESAMPLE, 0)`, so two policies run with the same stream see
//! identical proposal noise.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::models::{Proposal, SequentialModel};
use crate::numerics::{lse_unchecked, serde_float, stream_role, RngStream};

pub const FILTER_RECORD_VERSION: u32 = 1;

/// When to resample. Steps in a fixed schedule are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResamplingPolicy {
    Never,
    Always,
    /// Resample iff `ESS < tau·N`.
    EssThreshold {
        tau: f64,
    },
    FixedSchedule {
        steps: BTreeSet<usize>,
    },
}

impl Default for ResamplingPolicy {
    fn default() -> Self {
        ResamplingPolicy::EssThreshold { tau: 0.5 }
    }
}

impl ResamplingPolicy {
    pub fn fixed(steps: impl IntoIterator<Item = usize>) -> Self {
        ResamplingPolicy::FixedSchedule {
            steps: steps.into_iter().collect(),
        }
    }

    /// Whether resampling times are known before the filter runs.
    pub fn is_fixed(&self) -> bool {
        !matches!(self, ResamplingPolicy::EssThreshold { .. })
    }

    /// The resampling steps for a sequence of length `len`, when fixed.
    pub fn schedule(&self, len: usize) -> Option<BTreeSet<usize>> {
        match self {
            ResamplingPolicy::Never => Some(BTreeSet::new()),
            ResamplingPolicy::Always => Some((1..=len).collect()),
            ResamplingPolicy::FixedSchedule { steps } => Some(steps.clone()),
            ResamplingPolicy::EssThreshold { .. } => None,
        }
    }

    pub fn should_resample(&self, step: usize, ess: f64, n: usize) -> bool {
        match self {
            ResamplingPolicy::Never => false,
            ResamplingPolicy::Always => true,
            ResamplingPolicy::EssThreshold { tau } => ess < tau * n as f64,
            ResamplingPolicy::FixedSchedule { steps } => steps.contains(&step),
        }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        match self {
            ResamplingPolicy::EssThreshold { tau } if !(*tau > 0.0 && *tau <= 1.0) => {
                usage(format!("ESS threshold must lie in (0, 1], got {tau}"))
            }
            ResamplingPolicy::FixedSchedule { steps } if steps.iter().any(|&s| s == 0 || s > len) => {
                usage(format!("resampling steps must lie in 1..={len}"))
            }
            _ => Ok(()),
        }
    }

    /// Short label used in CSV output.
    pub fn label(&self) -> String {
        match self {
            ResamplingPolicy::Never => "never".into(),
            ResamplingPolicy::Always => "always".into(),
            ResamplingPolicy::EssThreshold { tau } => format!("ess({tau})"),
            ResamplingPolicy::FixedSchedule { steps } => {
                let s: Vec<String> = steps.iter().map(|s| s.to_string()).collect();
                format!("fixed({})", s.join(" "))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingScheme {
    #[default]
    Multinomial,
    Alias,
}

fn check_probabilities(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return usage("weight vector is empty");
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return usage("weights must be finite and nonnegative");
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return usage(format!("weights are not normalized (sum = {s})"));
    }
    Ok(())
}

/// Effective sample size `1 / Σ w_i²` of normalized weights.
pub fn ess(weights: &[f64]) -> Result<f64> {
    check_probabilities(weights)?;
    Ok(ess_unchecked(weights))
}

fn ess_unchecked(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// `n` i.i.d. categorical draws by inverse-CDF search.
pub fn resample_multinomial(weights: &[f64], n: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    check_probabilities(weights)?;
    if n == 0 {
        return usage("resampling count must be at least 1");
    }
    Ok(multinomial_unchecked(weights, n, rng))
}

fn multinomial_unchecked(weights: &[f64], n: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cdf.push(acc);
    }
    let last_positive = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    (0..n)
        .map(|_| {
            let u = rng.uniform() * acc;
            cdf.partition_point(|&c| c <= u).min(last_positive)
        })
        .collect()
}

/// Walker/Vose alias table: `O(N)` setup, `O(1)` per draw.
#[derive(Clone, Debug, PartialEq)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    pub fn new(weights: &[f64]) -> Result<Self> {
        check_probabilities(weights)?;
        let n = weights.len();
        let total: f64 = weights.iter().sum();
        let scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut prob = vec![0.0; n];
        let mut alias: Vec<usize> = (0..n).collect();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scaled[i] < 1.0);
        let mut residual = scaled.clone();
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            prob[s] = residual[s];
            alias[s] = l;
            residual[l] -= 1.0 - residual[s];
            if residual[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        let heaviest = (0..n).max_by(|&a, &b| weights[a].total_cmp(&weights[b])).unwrap_or(0);
        for i in large.into_iter().chain(small) {
            if weights[i] > 0.0 {
                prob[i] = 1.0;
            } else {
                prob[i] = 0.0;
                alias[i] = heaviest;
            }
        }
        Ok(Self { prob, alias })
    }

    pub fn sample(&self, rng: &mut RngStream) -> usize {
        let i = rng.below(self.prob.len());
        if rng.uniform() < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }
}

/// `n` i.i.d. categorical draws through an [`AliasTable`].
pub fn resample_alias(weights: &[f64], n: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if n == 0 {
        return usage("resampling count must be at least 1");
    }
    let table = AliasTable::new(weights)?;
    Ok((0..n).map(|_| table.sample(rng)).collect())
}

/// Everything the filter produced at one step (0-based index `t`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Standard-normal noise behind each proposed particle.
    pub noises: Vec<f64>,
    /// `z_t^i` before resampling.
    pub particles: Vec<f64>,
    /// `log α_t^i`.
    #[serde(with = "serde_float::vec")]
    pub log_alpha: Vec<f64>,
    /// `log w̄_{t-1}^i`: normalized weights carried into this step
    /// (`-log N` after a resampling event).
    #[serde(with = "serde_float::vec")]
    pub carried_log_weights: Vec<f64>,
    /// Normalized `log w_t^i` before any resampling at this step.
    #[serde(with = "serde_float::vec")]
    pub log_weights: Vec<f64>,
    /// `log p̂_t = log Σ_i w̄_{t-1}^i α_t^i`.
    #[serde(with = "serde_float")]
    pub log_phat_increment: f64,
    pub ess: f64,
    pub resampled: bool,
    /// Ancestor index of each slot after resampling at this step.
    pub ancestors: Option<Vec<usize>>,
}

/// A complete particle-filter run, sufficient to replay it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub format_version: u32,
    pub n_particles: usize,
    pub policy: ResamplingPolicy,
    pub steps: Vec<StepRecord>,
    #[serde(with = "serde_float")]
    pub log_phat: f64,
}

/// Snapshot of the particle population after step `t` (and its resampling).
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    /// `N × (t + 1)` latent paths.
    pub trajectories: Vec<Vec<f64>>,
    pub log_weights: Vec<f64>,
    pub log_phat: f64,
    pub t: usize,
}

impl FilterRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Index of particle `i`'s parent at step `t - 1`.
    pub fn parent(&self, t: usize, i: usize) -> usize {
        match t.checked_sub(1).and_then(|p| self.steps[p].ancestors.as_ref()) {
            Some(a) => a[i],
            None => i,
        }
    }

    /// 1-based steps at which resampling happened.
    pub fn resampling_steps(&self) -> Vec<usize> {
        self.steps
            .iter()
            .enumerate()
            .filter(|(_, s)| s.resampled)
            .map(|(t, _)| t + 1)
            .collect()
    }

    pub fn ensemble_at(&self, t: usize) -> ParticleEnsemble {
        let n = self.n_particles;
        let step = &self.steps[t];
        let slots: Vec<usize> = match &step.ancestors {
            Some(a) => a.clone(),
            None => (0..n).collect(),
        };
        let trajectories = slots
            .iter()
            .map(|&start| {
                let mut path = vec![0.0; t + 1];
                let mut idx = start;
                for k in (0..=t).rev() {
                    path[k] = self.steps[k].particles[idx];
                    idx = self.parent(k, idx);
                }
                path
            })
            .collect();
        let log_weights = if step.resampled {
            vec![-(n as f64).ln(); n]
        } else {
            step.log_weights.clone()
        };
        let log_phat = self.steps[..=t].iter().map(|s| s.log_phat_increment).sum();
        ParticleEnsemble {
            trajectories,
            log_weights,
            log_phat,
            t,
        }
    }

    /// Final latent paths `z_{1:T}^i`.
    pub fn trajectories(&self) -> Vec<Vec<f64>> {
        self.ensemble_at(self.len() - 1).trajectories
    }
}

/// Deliberate faults for negative-control tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Carry unnormalized weights to the next step.
    SkipWeightNormalization,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOptions {
    pub scheme: ResamplingScheme,
    #[serde(skip)]
    pub fault: Option<Fault>,
}

/// Source of the filter's random choices.
pub(crate) trait Driver {
    fn noise(&mut self, t: usize, i: usize) -> f64;

    /// Pinned particle value, bypassing the proposal.
    fn pinned(&self, _t: usize, _i: usize) -> Option<f64> {
        None
    }

    /// Ancestors if resampling happens at 1-based `step`.
    fn resample(&mut self, step: usize, weights: &[f64], ess: f64) -> Option<Vec<usize>>;
}

pub(crate) struct LiveDriver<'a> {
    proposal_streams: Vec<RngStream>,
    resample_stream: RngStream,
    policy: &'a ResamplingPolicy,
    scheme: ResamplingScheme,
}

impl<'a> LiveDriver<'a> {
    pub(crate) fn new(rng: &RngStream, n: usize, policy: &'a ResamplingPolicy, scheme: ResamplingScheme) -> Self {
        Self {
            proposal_streams: (0..n as u64).map(|i| rng.derive(stream_role::PROPOSAL, i)).collect(),
            resample_stream: rng.derive(stream_role::RESAMPLE, 0),
            policy,
            scheme,
        }
    }

    pub(crate) fn draw_ancestors(&mut self, weights: &[f64]) -> Vec<usize> {
        let n = weights.len();
        match self.scheme {
            ResamplingScheme::Multinomial => multinomial_unchecked(weights, n, &mut self.resample_stream),
            ResamplingScheme::Alias => {
                let table = AliasTable::new(weights).expect("filter weights are normalized");
                (0..n).map(|_| table.sample(&mut self.resample_stream)).collect()
            }
        }
    }

    pub(crate) fn uniform_slot(&mut self, n: usize) -> usize {
        self.resample_stream.below(n)
    }
}

impl Driver for LiveDriver<'_> {
    fn noise(&mut self, _t: usize, i: usize) -> f64 {
        self.proposal_streams[i].standard_normal()
    }

    fn resample(&mut self, step: usize, weights: &[f64], ess: f64) -> Option<Vec<usize>> {
        self.policy
            .should_resample(step, ess, weights.len())
            .then(|| self.draw_ancestors(weights))
    }
}

struct ReplayDriver<'a> {
    record: &'a FilterRecord,
}

impl Driver for ReplayDriver<'_> {
    fn noise(&mut self, t: usize, i: usize) -> f64 {
        self.record.steps[t].noises[i]
    }

    fn resample(&mut self, step: usize, _weights: &[f64], _ess: f64) -> Option<Vec<usize>> {
        self.record.steps[step - 1].ancestors.clone()
    }
}

pub(crate) fn check_inputs(x: &[f64], n: usize, policy: &ResamplingPolicy) -> Result<()> {
    if n == 0 {
        return usage("particle count must be at least 1");
    }
    if x.is_empty() {
        return usage("observation sequence is empty");
    }
    if x.iter().any(|v| !v.is_finite()) {
        return usage("observations must be finite");
    }
    policy.validate(x.len())
}

/// Algorithm core shared by live runs, replays and conditional SMC.
pub(crate) fn run_core<M: SequentialModel, P: Proposal<M>, D: Driver>(
    model: &M,
    proposal: &P,
    x: &[f64],
    n: usize,
    policy: &ResamplingPolicy,
    driver: &mut D,
    fault: Option<Fault>,
    keep: bool,
) -> Result<FilterRecord> {
    let uniform = -(n as f64).ln();
    let mut steps = Vec::with_capacity(if keep { x.len() } else { 0 });
    let mut prev_particles: Vec<f64> = Vec::new();
    let mut prev_log_weights = vec![uniform; n];
    let mut prev_ancestors: Option<Vec<usize>> = None;
    let mut log_phat = 0.0;
    for t in 0..x.len() {
        let mut noises = Vec::with_capacity(n);
        let mut particles = Vec::with_capacity(n);
        let mut log_alpha = Vec::with_capacity(n);
        let mut carried = Vec::with_capacity(n);
        for i in 0..n {
            let parent = prev_ancestors.as_ref().map_or(i, |a| a[i]);
            let z_prev = (t > 0).then(|| prev_particles[parent]);
            let q = proposal.conditional(model, t, x, z_prev);
            let s = q.std();
            let (eps, z) = match driver.pinned(t, i) {
                Some(y) => ((y - q.mean) / s, y),
                None => {
                    let eps = driver.noise(t, i);
                    (eps, q.mean + s * eps)
                }
            };
            let la = model.log_joint_step(t, x, z_prev, z) - q.log_pdf(z);
            noises.push(eps);
            particles.push(z);
            log_alpha.push(if la.is_nan() { f64::NEG_INFINITY } else { la });
            carried.push(if prev_ancestors.is_some() {
                uniform
            } else {
                prev_log_weights[i]
            });
        }
        let unnorm: Vec<f64> = carried.iter().zip(&log_alpha).map(|(w, a)| w + a).collect();
        let inc = lse_unchecked(&unnorm);
        if inc == f64::NEG_INFINITY || inc.is_nan() {
            return Err(Error::Collapse { step: t + 1 });
        }
        log_phat += inc;
        let log_weights: Vec<f64> = match fault {
            Some(Fault::SkipWeightNormalization) => unnorm,
            None => unnorm.iter().map(|v| v - inc).collect(),
        };
        let weights: Vec<f64> = log_weights.iter().map(|v| v.exp()).collect();
        let sum: f64 = weights.iter().sum();
        let ess = sum * sum / weights.iter().map(|w| w * w).sum::<f64>();
        let normalized: Vec<f64> = weights.iter().map(|w| w / sum).collect();
        let ancestors = driver.resample(t + 1, &normalized, ess);
        if keep {
            steps.push(StepRecord {
                noises,
                particles: particles.clone(),
                log_alpha,
                carried_log_weights: carried,
                log_weights: log_weights.clone(),
                log_phat_increment: inc,
                ess,
                resampled: ancestors.is_some(),
                ancestors: ancestors.clone(),
            });
        }
        prev_particles = particles;
        prev_log_weights = log_weights;
        prev_ancestors = ancestors;
    }
    Ok(FilterRecord {
        format_version: FILTER_RECORD_VERSION,
        n_particles: n,
        policy: policy.clone(),
        steps,
        log_phat,
    })
}

/// Run the particle filter and keep the full record.
pub fn run_particle_filter<M: SequentialModel, P: Proposal<M>>(
    model: &M,
    proposal: &P,
    x: &[f64],
    n: usize,
    policy: &ResamplingPolicy,
    rng: &RngStream,
) -> Result<FilterRecord> {
    run_particle_filter_with(model, proposal, x, n, policy, rng, &FilterOptions::default())
}

pub fn run_particle_filter_with<M: SequentialModel, P: Proposal<M>>(
    model: &M,
    proposal: &P,
    x: &[f64],
    n: usize,
    policy: &ResamplingPolicy,
    rng: &RngStream,
    opts: &FilterOptions,
) -> Result<FilterRecord> {
    check_inputs(x, n, policy)?;
    let mut driver = LiveDriver::new(rng, n, policy, opts.scheme);
    run_core(model, proposal, x, n, policy, &mut driver, opts.fault, true)
}

/// `log p̂_N(x_{1:T})` without materializing the record.
pub fn filter_log_phat<M: SequentialModel, P: Proposal<M>>(
    model: &M,
    proposal: &P,
    x: &[f64],
    n: usize,
    policy: &ResamplingPolicy,
    rng: &RngStream,
    opts: &FilterOptions,
) -> Result<f64> {
    check_inputs(x, n, policy)?;
    let mut driver = LiveDriver::new(rng, n, policy, opts.scheme);
    Ok(run_core(model, proposal, x, n, policy, &mut driver, opts.fault, false)?.log_phat)
}

/// Recompute a record from its stored noises and ancestors.
pub fn replay<M: SequentialModel, P: Proposal<M>>(
    record: &FilterRecord,
    model: &M,
    proposal: &P,
    x: &[f64],
) -> Result<FilterRecord> {
    if record.steps.len() != x.len() {
        return usage(format!(
            "record has {} steps but {} observations",
            record.steps.len(),
            x.len()
        ));
    }
    let n = record.n_particles;
    if record.steps.iter().any(|s| s.noises.len() != n) {
        return usage("record noise arrays do not match the particle count");
    }
    let mut driver = ReplayDriver { record };
    run_core(model, proposal, x, n, &record.policy, &mut driver, None, true)
}

pub fn replay_log_phat<M: SequentialModel, P: Proposal<M>>(
    record: &FilterRecord,
    model: &M,
    proposal: &P,
    x: &[f64],
) -> Result<f64> {
    Ok(replay(record, model, proposal, x)?.log_phat)
}
