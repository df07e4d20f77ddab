//! Verification experiments: bound bias against relative variance, the
//! inverse-moment lemma, variance growth in the sequence length, KL from the
//! proposal to the prior, and cross-evaluation of bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{usage, Error, Result};
use crate::models::{AnyProposal, Lgssm, LgssmParams, Proposal, SequentialModel};
use crate::numerics::{stream_role, RngStream};
use crate::objectives::{replicate_values, ObjectiveSpec};
use crate::smc::ResamplingPolicy;
use crate::stats::{central_moment, summarize};

/// Bias of a bound and the relative variance of its estimator at one `N`.
///
/// With `Δ = p̂_N / p(x) - 1`, the bias `log p(x) - E[log p̂_N]` equals
/// `½ Var(Δ)` up to a remainder controlled by `g(N) = E[Δ⁶]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceReport {
    pub n: usize,
    pub bias: f64,
    pub bias_se: f64,
    pub rel_var: f64,
    pub rel_var_se: f64,
    pub half_rel_var: f64,
    pub sixth_moment: f64,
    pub sixth_moment_se: f64,
    pub replicates: usize,
}

impl BiasVarianceReport {
    /// `bias / (½ rel_var)`.
    pub fn ratio(&self) -> f64 {
        self.bias / self.half_rel_var
    }

    pub fn csv_header() -> &'static str {
        "N,bias,bias_se,rel_var,rel_var_se,half_rel_var,sixth_moment,sixth_moment_se,replicates"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.n,
            self.bias,
            self.bias_se,
            self.rel_var,
            self.rel_var_se,
            self.half_rel_var,
            self.sixth_moment,
            self.sixth_moment_se,
            self.replicates
        )
    }
}

fn report_from_log_ratios(n: usize, log_ratios: &[f64]) -> Result<BiasVarianceReport> {
    let lr = summarize(log_ratios)?;
    let ratios: Vec<f64> = log_ratios.iter().map(|l| l.exp()).collect();
    let r = summarize(&ratios)?;
    let dev6: Vec<f64> = ratios.iter().map(|u| (u - r.mean).powi(6)).collect();
    let d6 = summarize(&dev6)?;
    Ok(BiasVarianceReport {
        n,
        bias: -lr.mean,
        bias_se: lr.se_mean,
        rel_var: r.var,
        rel_var_se: r.se_var,
        half_rel_var: 0.5 * r.var,
        sixth_moment: central_moment(&ratios, 6),
        sixth_moment_se: d6.se_mean,
        replicates: log_ratios.len(),
    })
}

/// For each `N`, replicate `objective` with `N` particles and compare its
/// bias with half the relative variance of `p̂_N`. Needs an exact marginal.
pub fn bias_vs_relative_variance<M: SequentialModel, P: Proposal<M>>(
    model: &M,
    proposal: &P,
    x: &[f64],
    objective: &ObjectiveSpec,
    ns: &[usize],
    replicates: usize,
    rng: &RngStream,
) -> Result<Vec<BiasVarianceReport>> {
    let oracle = model.exact_log_marginal(x)?.log_marginal;
    ns.iter()
        .enumerate()
        .map(|(k, &n)| {
            let spec = objective.with_particles(n);
            let stream = rng.derive(stream_role::AUX, k as u64);
            let values = replicate_values(&spec, model, proposal, x, replicates, &stream)?;
            let log_ratios: Vec<f64> = values.iter().map(|v| v - oracle).collect();
            report_from_log_ratios(n, &log_ratios)
        })
        .collect()
}

/// Law of the i.i.d. positive weights averaged by `p̂_N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightDistribution {
    LogNormal { mu: f64, sigma: f64 },
    PointMass { value: f64 },
    Exponential { rate: f64 },
}

impl WeightDistribution {
    fn sample(&self, rng: &mut RngStream) -> f64 {
        match *self {
            WeightDistribution::LogNormal { mu, sigma } => (mu + sigma * rng.standard_normal()).exp(),
            WeightDistribution::PointMass { value } => value,
            WeightDistribution::Exponential { rate } => -(-rng.uniform()).ln_1p() / rate,
        }
    }

    /// `E[w⁻¹]` when finite.
    pub fn exact_inverse_moment(&self) -> Option<f64> {
        match *self {
            WeightDistribution::LogNormal { mu, sigma } => Some((-mu + 0.5 * sigma * sigma).exp()),
            WeightDistribution::PointMass { value } => Some(1.0 / value),
            WeightDistribution::Exponential { .. } => None,
        }
    }
}

/// Constants with `P(w < v) ≤ C v^{1+ε}` on `[0, M)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaConstants {
    pub m: f64,
    pub c: f64,
    pub epsilon: f64,
}

impl LemmaConstants {
    /// `C M^ε / ε + 1 / M`.
    pub fn bound(&self) -> f64 {
        self.c * self.m.powf(self.epsilon) / self.epsilon + 1.0 / self.m
    }
}

/// Fit `C` for the given `M` and `ε` from the CDF on a fine log-spaced grid.
pub fn fit_lemma_constants(dist: &WeightDistribution, m: f64, epsilon: f64) -> Result<LemmaConstants> {
    if !(m > 0.0 && epsilon > 0.0) {
        return usage("M and ε must be positive");
    }
    match *dist {
        WeightDistribution::LogNormal { mu, sigma } => {
            if !(sigma > 0.0) {
                return Err(Error::Domain(format!("lognormal sigma must be positive, got {sigma}")));
            }
            let normal = Normal::new(mu, sigma).map_err(|e| Error::Domain(e.to_string()))?;
            // The CDF decays faster than any power at 0, so the supremum of
            // CDF(v) / v^{1+ε} is attained in the interior.
            let (lo, hi) = ((m * 1e-12).ln(), m.ln());
            let points = 200_000;
            let mut c: f64 = 0.0;
            for k in 0..=points {
                let lv = lo + (hi - lo) * k as f64 / points as f64;
                c = c.max(normal.cdf(lv) * (-(1.0 + epsilon) * lv).exp());
            }
            Ok(LemmaConstants {
                m,
                c: c * (1.0 + 1e-6),
                epsilon,
            })
        }
        WeightDistribution::PointMass { value } => {
            if !(value > 0.0) {
                return Err(Error::Domain("point mass must be positive".into()));
            }
            // No mass below `value`: any positive C works on [0, value).
            Ok(LemmaConstants {
                m: m.min(value),
                c: f64::MIN_POSITIVE,
                epsilon,
            })
        }
        WeightDistribution::Exponential { .. } => Err(Error::Unsupported(
            "the exponential CDF is linear near 0, so no C, ε > 0 satisfy P(w < v) ≤ C v^{1+ε}; \
             its first inverse moment is infinite"
                .into(),
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseMomentRow {
    pub n: usize,
    pub mean_inverse: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseMomentReport {
    pub distribution: WeightDistribution,
    pub constants: LemmaConstants,
    pub bound: f64,
    pub rows: Vec<InverseMomentRow>,
}

impl InverseMomentReport {
    fn row(&self, n: usize) -> Option<&InverseMomentRow> {
        self.rows.iter().find(|r| r.n == n)
    }

    /// `E[p̂_N⁻¹] ≤ E[p̂_1⁻¹]` at the 3·SE level for every `N` in the report.
    pub fn monotone_vs_single(&self) -> Option<bool> {
        let one = self.row(1)?;
        Some(self.rows.iter().all(|r| {
            let se = (r.se * r.se + one.se * one.se).sqrt();
            r.mean_inverse <= one.mean_inverse + 3.0 * se
        }))
    }

    /// Every row is below the lemma bound at the 3·SE level.
    pub fn within_bound(&self) -> bool {
        self.rows.iter().all(|r| r.mean_inverse <= self.bound + 3.0 * r.se)
    }
}

/// Monte Carlo estimate of `E[p̂_N⁻¹]` for `p̂_N` the mean of `N` weights,
/// with lemma constants fitted at `M = 1`, `ε = 1`.
pub fn inverse_moment_experiment(
    dist: &WeightDistribution,
    ns: &[usize],
    replicates: usize,
    rng: &RngStream,
) -> Result<InverseMomentReport> {
    let constants = fit_lemma_constants(dist, 1.0, 1.0)?;
    if ns.contains(&0) {
        return usage("N must be at least 1");
    }
    let rows = ns
        .iter()
        .map(|&n| {
            let base = rng.derive(stream_role::AUX, n as u64);
            let inv: Vec<f64> = (0..replicates as u64)
                .into_par_iter()
                .map(|r| {
                    let mut s = base.replicate(r);
                    let mean = (0..n).map(|_| dist.sample(&mut s)).sum::<f64>() / n as f64;
                    1.0 / mean
                })
                .collect();
            let s = summarize(&inv)?;
            Ok(InverseMomentRow {
                n,
                mean_inverse: s.mean,
                se: s.se_mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InverseMomentReport {
        distribution: *dist,
        constants,
        bound: constants.bound(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub t: usize,
    pub estimator: String,
    pub rel_var: f64,
    pub rel_var_se: f64,
}

impl ScalingRow {
    pub fn csv_header() -> &'static str {
        "T,estimator,rel_var,rel_var_se"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.t, self.estimator, self.rel_var, self.rel_var_se)
    }
}

/// Relative variance of `p̂_N` for the filter (ESS policy) and IWAE on the
/// length-`T` prefixes of one LGSSM sequence. Both estimators share
/// replicate streams and data.
pub fn variance_scaling_in_t(
    params: &LgssmParams,
    proposal: &AnyProposal,
    ts: &[usize],
    n: usize,
    replicates: usize,
    rng: &RngStream,
) -> Result<Vec<ScalingRow>> {
    let model = Lgssm::new(*params)?;
    let longest = ts.iter().copied().max().unwrap_or(0);
    let full = model.sample(longest, &mut rng.derive(stream_role::DATA, 0)).0;
    let mut rows = Vec::new();
    for &t in ts {
        let x = &full[..t];
        let oracle = model.exact_log_marginal(x)?.log_marginal;
        let stream = rng.derive(stream_role::AUX, t as u64);
        for spec in [
            ObjectiveSpec::Fivo {
                n_particles: n,
                policy: ResamplingPolicy::default(),
                scheme: Default::default(),
            },
            ObjectiveSpec::Iwae { n_particles: n },
        ] {
            let values = replicate_values(&spec, &model, proposal, x, replicates, &stream)?;
            let ratios: Vec<f64> = values.iter().map(|v| (v - oracle).exp()).collect();
            let s = summarize(&ratios)?;
            rows.push(ScalingRow {
                t,
                estimator: spec.name().to_string(),
                rel_var: s.var,
                rel_var_se: s.se_var,
            });
        }
    }
    Ok(rows)
}

/// `KL(q(z_{1:T} | x) ‖ p(z_{1:T}))` estimated by drawing paths from `q`
/// and summing closed-form Gaussian KLs of each step's conditionals.
pub fn kl_q_prior<M: SequentialModel, P: Proposal<M>>(
    model: &M,
    proposal: &P,
    x: &[f64],
    samples: usize,
    rng: &RngStream,
) -> Result<f64> {
    if samples == 0 || x.is_empty() {
        return usage("KL estimate needs samples and a non-empty sequence");
    }
    let mut total = 0.0;
    for s in 0..samples as u64 {
        let mut stream = rng.derive(stream_role::AUX, s);
        let mut z_prev = None;
        for t in 0..x.len() {
            let q = proposal.conditional(model, t, x, z_prev);
            total += q.kl(&model.transition(t, x, z_prev));
            z_prev = Some(q.sample(&mut stream));
        }
    }
    Ok(total / samples as f64)
}

/// Objective a parameter set was trained with, as far as bound reporting
/// is concerned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainedWith {
    Elbo,
    Iwae,
    Fivo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub mean: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossEvalRow {
    pub label: String,
    pub trained_with: TrainedWith,
    pub elbo: BoundValue,
    pub iwae: BoundValue,
    pub fivo: BoundValue,
    /// `max{elbo, iwae, fivo}` for ELBO- and IWAE-trained rows, `fivo` for
    /// filter-trained rows.
    pub reported: f64,
}

pub struct TrainedModel<M, P> {
    pub label: String,
    pub trained_with: TrainedWith,
    pub model: M,
    pub proposal: P,
}

/// Evaluate ELBO, IWAE_N and FIVO_N (ESS policy) on every trained model,
/// averaged over the sequences of `data` (per-sequence mean log-likelihood).
pub fn bound_cross_evaluation<M: SequentialModel, P: Proposal<M>>(
    trained: &[TrainedModel<M, P>],
    data: &[Vec<f64>],
    n: usize,
    replicates: usize,
    rng: &RngStream,
) -> Result<Vec<CrossEvalRow>> {
    if data.is_empty() {
        return usage("cross-evaluation needs at least one sequence");
    }
    let specs = [
        ObjectiveSpec::elbo(),
        ObjectiveSpec::Iwae { n_particles: n },
        ObjectiveSpec::Fivo {
            n_particles: n,
            policy: ResamplingPolicy::default(),
            scheme: Default::default(),
        },
    ];
    trained
        .iter()
        .map(|tm| {
            let mut bounds = Vec::with_capacity(3);
            for spec in &specs {
                let mut per_rep = vec![0.0; replicates];
                for (k, x) in data.iter().enumerate() {
                    let stream = rng.derive(stream_role::VALIDATION, k as u64);
                    let values = replicate_values(spec, &tm.model, &tm.proposal, x, replicates, &stream)?;
                    for (acc, v) in per_rep.iter_mut().zip(values) {
                        *acc += v / data.len() as f64;
                    }
                }
                let s = summarize(&per_rep)?;
                bounds.push(BoundValue {
                    mean: s.mean,
                    se: s.se_mean,
                });
            }
            let fivo = bounds.pop().expect("three bounds");
            let iwae = bounds.pop().expect("three bounds");
            let elbo = bounds.pop().expect("three bounds");
            let reported = match tm.trained_with {
                TrainedWith::Fivo => fivo.mean,
                _ => elbo.mean.max(iwae.mean).max(fivo.mean),
            };
            Ok(CrossEvalRow {
                label: tm.label.clone(),
                trained_with: tm.trained_with,
                elbo,
                iwae,
                fivo,
                reported,
            })
        })
        .collect()
}
