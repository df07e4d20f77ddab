//! Monte Carlo objectives: single-draw estimators of `log p̂` and a
//! replicated wrapper that reports a mean with its standard error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::models::{AnyProposal, Proposal, SequentialModel};
use crate::numerics::{lse_unchecked, stream_role, Gaussian, RngStream};
use crate::smc::{filter_log_phat, FilterOptions, ResamplingPolicy, ResamplingScheme};
use crate::stats::summarize;

/// One importance-sampling draw `log p(x, z) - log q(z | x)`, `z ~ q`.
///
/// Uses the same noise stream as particle 0 of the filter.
pub fn elbo_sample<M: SequentialModel, P: Proposal<M>>(
    model: &M,
    proposal: &P,
    x: &[f64],
    rng: &RngStream,
) -> Result<f64> {
    if x.is_empty() {
        return usage("observation sequence is empty");
    }
    Ok(path_log_weight(
        model,
        proposal,
        x,
        &mut rng.derive(stream_role::PROPOSAL, 0),
    ))
}

fn path_log_weight<M: SequentialModel, P: Proposal<M>>(model: &M, proposal: &P, x: &[f64], rng: &mut RngStream) -> f64 {
    let mut z_prev = None;
    let mut total = 0.0;
    for t in 0..x.len() {
        let q = proposal.conditional(model, t, x, z_prev);
        let z = q.mean + q.std() * rng.standard_normal();
        let la = model.log_joint_step(t, x, z_prev, z) - q.log_pdf(z);
        total += if la.is_nan() { f64::NEG_INFINITY } else { la };
        z_prev = Some(z);
    }
    total
}

/// `log (1/N) Σ_i p(x, z^i) / q(z^i | x)` with independent paths.
///
/// Path `i` uses the filter's particle-`i` stream, so this agrees with the
/// filter under [`ResamplingPolicy::Never`] up to floating-point reassociation.
pub fn iwae_estimate<M: SequentialModel, P: Proposal<M>>(
    model: &M,
    proposal: &P,
    x: &[f64],
    n: usize,
    rng: &RngStream,
) -> Result<f64> {
    if n == 0 {
        return usage("particle count must be at least 1");
    }
    if x.is_empty() {
        return usage("observation sequence is empty");
    }
    let per: Vec<f64> = (0..n as u64)
        .map(|i| path_log_weight(model, proposal, x, &mut rng.derive(stream_role::PROPOSAL, i)))
        .collect();
    Ok(lse_unchecked(&per) - (n as f64).ln())
}

/// `log p̂_N(x_{1:T})` from one particle-filter run.
pub fn fivo_estimate<M: SequentialModel, P: Proposal<M>>(
    model: &M,
    proposal: &P,
    x: &[f64],
    n: usize,
    policy: &ResamplingPolicy,
    rng: &RngStream,
) -> Result<f64> {
    filter_log_phat(model, proposal, x, n, policy, rng, &FilterOptions::default())
}

/// An unnormalized log density over a fixed-dimension vector.
pub trait JointDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, z: &[f64]) -> f64;
}

/// A normalized density that can also be sampled.
pub trait SamplingDensity: JointDensity {
    fn sample(&self, rng: &mut RngStream) -> Vec<f64>;
}

impl JointDensity for Gaussian {
    fn dim(&self) -> usize {
        1
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        self.log_pdf(z[0])
    }
}

impl SamplingDensity for Gaussian {
    fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        vec![Gaussian::sample(self, rng)]
    }
}

/// `z_{1:T} ↦ log p(x_{1:T}, z_{1:T})` for fixed observations.
pub struct SequenceJoint<'a, M> {
    pub model: &'a M,
    pub x: &'a [f64],
}

impl<M: SequentialModel> JointDensity for SequenceJoint<'_, M> {
    fn dim(&self) -> usize {
        self.x.len()
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        self.model.log_joint(self.x, z)
    }
}

/// `q(z_{1:T} | x_{1:T}) = Π_t q_t(z_t | x_{1:t}, z_{t-1})` as a density.
pub struct SequenceProposalDensity<'a, M, P> {
    pub model: &'a M,
    pub proposal: &'a P,
    pub x: &'a [f64],
}

impl<M, P> Clone for SequenceProposalDensity<'_, M, P> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<M, P> Copy for SequenceProposalDensity<'_, M, P> {}

impl<M: SequentialModel, P: Proposal<M>> JointDensity for SequenceProposalDensity<'_, M, P> {
    fn dim(&self) -> usize {
        self.x.len()
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        (0..self.x.len())
            .map(|t| {
                let zp = (t > 0).then(|| z[t - 1]);
                self.proposal.conditional(self.model, t, self.x, zp).log_pdf(z[t])
            })
            .sum()
    }
}

impl<M: SequentialModel, P: Proposal<M>> SamplingDensity for SequenceProposalDensity<'_, M, P> {
    fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let mut z: Vec<f64> = Vec::with_capacity(self.x.len());
        for t in 0..self.x.len() {
            let q = self.proposal.conditional(self.model, t, self.x, z.last().copied());
            z.push(q.mean + q.std() * rng.standard_normal());
        }
        z
    }
}

/// Single-site Gaussian random-walk Metropolis-Hastings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhKernel {
    pub step_std: f64,
    /// Sweeps over all coordinates per temperature; 0 makes the kernel the
    /// identity.
    pub sweeps: usize,
}

/// Inverse temperatures `0 = β_0 ≤ … ≤ β_K = 1` and the kernel applied at
/// each intermediate temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AisSchedule {
    pub betas: Vec<f64>,
    pub kernel: MhKernel,
}

impl AisSchedule {
    /// `intervals` equal steps from 0 to 1.
    pub fn linear(intervals: usize, kernel: MhKernel) -> Result<Self> {
        if intervals == 0 {
            return usage("AIS needs at least one temperature interval");
        }
        let betas = (0..=intervals).map(|i| i as f64 / intervals as f64).collect();
        Ok(Self { betas, kernel })
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.betas;
        if b.len() < 2 || b[0] != 0.0 || *b.last().expect("len checked") != 1.0 {
            return usage("AIS temperatures must start at 0 and end at 1");
        }
        if b.windows(2).any(|w| !(w[1] >= w[0])) {
            return usage("AIS temperatures must be nondecreasing");
        }
        if !(self.kernel.step_std > 0.0) || !self.kernel.step_std.is_finite() {
            return usage("MH step size must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AisOutput {
    pub log_estimate: f64,
    /// Fraction of accepted MH moves; `NaN` when no kernel ran.
    pub acceptance_rate: f64,
}

/// Annealed importance sampling:
/// `Σ_i (β_{i+1} - β_i) log(p(x, z_i) / q(z_i | x))` with `z_0 ~ q` and
/// `z_i` drawn from an MH kernel leaving `q^{1-β_i} p^{β_i}` invariant.
pub fn ais_estimate<T: JointDensity, Q: SamplingDensity>(
    target: &T,
    q: &Q,
    schedule: &AisSchedule,
    rng: &RngStream,
) -> Result<AisOutput> {
    schedule.validate()?;
    if target.dim() != q.dim() {
        return usage("target and proposal dimensions differ");
    }
    let mut z = q.sample(&mut rng.derive(stream_role::PROPOSAL, 0));
    let mut kernel_rng = rng.derive(stream_role::KERNEL, 0);
    let (mut lp, mut lq) = (target.log_density(&z), q.log_density(&z));
    let betas = &schedule.betas;
    let mut log_w = 0.0;
    let (mut proposed, mut accepted) = (0usize, 0usize);
    for i in 0..betas.len() - 1 {
        let db = betas[i + 1] - betas[i];
        if db > 0.0 {
            log_w += db * (lp - lq);
        }
        if i + 2 == betas.len() {
            break;
        }
        let beta = betas[i + 1];
        for _ in 0..schedule.kernel.sweeps {
            for d in 0..z.len() {
                let old = z[d];
                z[d] = old + schedule.kernel.step_std * kernel_rng.standard_normal();
                let (np, nq) = (target.log_density(&z), q.log_density(&z));
                let log_ratio = (1.0 - beta) * (nq - lq) + beta * (np - lp);
                proposed += 1;
                if kernel_rng.uniform().ln() < log_ratio {
                    accepted += 1;
                    lp = np;
                    lq = nq;
                } else {
                    z[d] = old;
                }
            }
        }
    }
    let acceptance_rate = if proposed == 0 {
        f64::NAN
    } else {
        accepted as f64 / proposed as f64
    };
    if proposed > 0 && accepted == 0 {
        log::warn!("AIS kernel accepted none of {proposed} proposals");
    }
    Ok(AisOutput {
        log_estimate: log_w,
        acceptance_rate,
    })
}

/// Mixture `Σ_i w_i q_i` for multiple importance sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct MisMixture<Q> {
    pub components: Vec<Q>,
    pub weights: Vec<f64>,
}

impl<Q> MisMixture<Q> {
    pub fn new(components: Vec<Q>, weights: Vec<f64>) -> Result<Self> {
        let m = Self { components, weights };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() || self.components.len() != self.weights.len() {
            return usage("mixture needs one weight per component and at least one component");
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return usage("mixture weights must be finite and nonnegative");
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return usage(format!("mixture weights sum to {s}, not 1"));
        }
        Ok(())
    }
}

/// Rao-Blackwellized mixture estimator
/// `log Σ_i w_i p(x, z_i) / Σ_j w_j q_j(z_i | x)` with `z_i ~ q_i`.
///
/// Components with zero weight contribute nothing; a zero denominator gives
/// `-inf` for that term.
pub fn mis_estimate<T: JointDensity, Q: SamplingDensity>(
    target: &T,
    mixture: &MisMixture<Q>,
    rng: &RngStream,
) -> Result<f64> {
    mixture.validate()?;
    let log_w: Vec<f64> = mixture.weights.iter().map(|w| w.ln()).collect();
    let mut terms = Vec::with_capacity(mixture.components.len());
    for (i, qi) in mixture.components.iter().enumerate() {
        let z = qi.sample(&mut rng.derive(stream_role::PROPOSAL, i as u64));
        if mixture.weights[i] == 0.0 {
            continue;
        }
        let denom_terms: Vec<f64> = mixture
            .components
            .iter()
            .zip(&log_w)
            .filter(|(_, lw)| lw.is_finite())
            .map(|(qj, lw)| lw + qj.log_density(&z))
            .collect();
        let denom = lse_unchecked(&denom_terms);
        let lp = target.log_density(&z);
        let term = if denom == f64::NEG_INFINITY || lp == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            log_w[i] + lp - denom
        };
        terms.push(if term.is_nan() { f64::NEG_INFINITY } else { term });
    }
    Ok(lse_unchecked(&terms))
}

fn default_one() -> usize {
    1
}

/// An objective as it appears in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    /// Average of `samples` independent ELBO draws (matched-compute runs use
    /// `samples = N`).
    Elbo {
        #[serde(default = "default_one")]
        samples: usize,
    },
    Iwae {
        n_particles: usize,
    },
    Fivo {
        n_particles: usize,
        #[serde(default)]
        policy: ResamplingPolicy,
        #[serde(default)]
        scheme: ResamplingScheme,
    },
    /// Linear temperature schedule with `intervals` steps over the whole
    /// latent path.
    Ais {
        intervals: usize,
        kernel: MhKernel,
    },
    Mis {
        components: Vec<AnyProposal>,
        weights: Vec<f64>,
    },
}

impl ObjectiveSpec {
    pub fn elbo() -> Self {
        ObjectiveSpec::Elbo { samples: 1 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveSpec::Elbo { .. } => "elbo",
            ObjectiveSpec::Iwae { .. } => "iwae",
            ObjectiveSpec::Fivo { .. } => "fivo",
            ObjectiveSpec::Ais { .. } => "ais",
            ObjectiveSpec::Mis { .. } => "mis",
        }
    }

    /// Number of samples per estimate (particles, draws, or components).
    pub fn n_particles(&self) -> usize {
        match self {
            ObjectiveSpec::Elbo { samples } => *samples,
            ObjectiveSpec::Iwae { n_particles } | ObjectiveSpec::Fivo { n_particles, .. } => *n_particles,
            ObjectiveSpec::Ais { .. } => 1,
            ObjectiveSpec::Mis { components, .. } => components.len(),
        }
    }

    /// The same objective with its particle or sample count replaced.
    /// AIS and MIS are returned unchanged.
    pub fn with_particles(&self, n: usize) -> Self {
        let mut out = self.clone();
        match &mut out {
            ObjectiveSpec::Elbo { samples } => *samples = n,
            ObjectiveSpec::Iwae { n_particles } | ObjectiveSpec::Fivo { n_particles, .. } => *n_particles = n,
            ObjectiveSpec::Ais { .. } | ObjectiveSpec::Mis { .. } => {}
        }
        out
    }

    pub fn policy(&self) -> Option<&ResamplingPolicy> {
        match self {
            ObjectiveSpec::Fivo { policy, .. } => Some(policy),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ObjectiveSpec::Elbo { samples: 0 }
            | ObjectiveSpec::Iwae { n_particles: 0 }
            | ObjectiveSpec::Fivo { n_particles: 0, .. } => usage("particle or sample count must be at least 1"),
            ObjectiveSpec::Ais { intervals, kernel } => AisSchedule::linear(*intervals, *kernel)?.validate(),
            ObjectiveSpec::Mis { components, weights } => {
                MisMixture::new(components.clone(), weights.clone()).map(|_| ())
            }
            _ => Ok(()),
        }
    }

    /// One draw of the estimator for sequence `x`.
    pub fn estimate<M: SequentialModel, P: Proposal<M>>(
        &self,
        model: &M,
        proposal: &P,
        x: &[f64],
        rng: &RngStream,
    ) -> Result<f64> {
        match self {
            ObjectiveSpec::Elbo { samples } => {
                let mut total = 0.0;
                for s in 0..*samples as u64 {
                    let stream = if *samples == 1 {
                        rng.clone()
                    } else {
                        rng.derive(stream_role::AUX, s)
                    };
                    total += elbo_sample(model, proposal, x, &stream)?;
                }
                Ok(total / *samples as f64)
            }
            ObjectiveSpec::Iwae { n_particles } => iwae_estimate(model, proposal, x, *n_particles, rng),
            ObjectiveSpec::Fivo {
                n_particles,
                policy,
                scheme,
            } => {
                let opts = FilterOptions {
                    scheme: *scheme,
                    fault: None,
                };
                filter_log_phat(model, proposal, x, *n_particles, policy, rng, &opts)
            }
            ObjectiveSpec::Ais { intervals, kernel } => {
                let schedule = AisSchedule::linear(*intervals, *kernel)?;
                let target = SequenceJoint { model, x };
                let q = SequenceProposalDensity { model, proposal, x };
                Ok(ais_estimate(&target, &q, &schedule, rng)?.log_estimate)
            }
            ObjectiveSpec::Mis { components, weights } => {
                let comps: Vec<SequenceProposalDensity<'_, M, AnyProposal>> = components
                    .iter()
                    .map(|c| SequenceProposalDensity { model, proposal: c, x })
                    .collect();
                let mixture = MisMixture::new(comps, weights.clone())?;
                mis_estimate(&SequenceJoint { model, x }, &mixture, rng)
            }
        }
    }
}

/// Replicated estimate of an objective with its standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub objective: String,
    pub n_particles: usize,
    pub policy: Option<String>,
    pub mean: f64,
    pub std_error: f64,
    pub replicates: usize,
}

/// Estimator draws on the given streams, evaluated in parallel and returned
/// in stream order.
pub fn values_on_streams<M: SequentialModel, P: Proposal<M>>(
    spec: &ObjectiveSpec,
    model: &M,
    proposal: &P,
    x: &[f64],
    streams: &[RngStream],
) -> Result<Vec<f64>> {
    spec.validate()?;
    streams
        .par_iter()
        .map(|s| spec.estimate(model, proposal, x, s))
        .collect()
}

/// Draws on streams `rng.replicate(0..replicates)`.
pub fn replicate_values<M: SequentialModel, P: Proposal<M>>(
    spec: &ObjectiveSpec,
    model: &M,
    proposal: &P,
    x: &[f64],
    replicates: usize,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    let streams: Vec<RngStream> = (0..replicates as u64).map(|r| rng.replicate(r)).collect();
    values_on_streams(spec, model, proposal, x, &streams)
}

fn bound_from_values(spec: &ObjectiveSpec, values: &[f64]) -> Result<BoundEstimate> {
    let s = summarize(values)?;
    Ok(BoundEstimate {
        objective: spec.name().into(),
        n_particles: spec.n_particles(),
        policy: spec.policy().map(|p| p.label()),
        mean: s.mean,
        std_error: s.se_mean,
        replicates: values.len(),
    })
}

/// Mean and standard error over `replicates` independent draws.
pub fn estimate_bound<M: SequentialModel, P: Proposal<M>>(
    spec: &ObjectiveSpec,
    model: &M,
    proposal: &P,
    x: &[f64],
    replicates: usize,
    rng: &RngStream,
) -> Result<BoundEstimate> {
    if replicates < 2 {
        return usage("at least 2 replicates are needed for a standard error");
    }
    bound_from_values(spec, &replicate_values(spec, model, proposal, x, replicates, rng)?)
}

/// As [`estimate_bound`] on caller-chosen streams, which must be distinct.
pub fn estimate_bound_with_streams<M: SequentialModel, P: Proposal<M>>(
    spec: &ObjectiveSpec,
    model: &M,
    proposal: &P,
    x: &[f64],
    streams: &[RngStream],
) -> Result<BoundEstimate> {
    if streams.len() < 2 {
        return usage("at least 2 replicates are needed for a standard error");
    }
    let mut keys: Vec<(u64, u64)> = streams.iter().map(|s| (s.seed(), s.stream_id())).collect();
    keys.sort_unstable();
    if keys.windows(2).any(|w| w[0] == w[1]) {
        return usage("replicate streams must be distinct");
    }
    bound_from_values(spec, &values_on_streams(spec, model, proposal, x, streams)?)
}
