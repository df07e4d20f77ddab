//! Gradient estimators for the filtering objective and its relatives.
//!
//! All estimators differentiate a recorded filter run by forward-mode
//! propagation: every particle carries the derivative of its value (and of
//! its normalized log weight) with respect to the stacked parameter vector
//! `[θ, φ]`. Ancestor indices are held fixed throughout.

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::models::{log_normal_partials, Proposal, SequentialModel};
use crate::numerics::{lse_unchecked, stream_role, RngStream};
use crate::objectives::ObjectiveSpec;
use crate::smc::{replay_log_phat, run_particle_filter, FilterRecord, ResamplingPolicy};
use crate::stats::summarize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientVariant {
    /// Pathwise gradient of `log p̂` with resampling treated as constant.
    ReparamBiased,
    /// Pathwise gradient plus resampling score terms.
    ReparamFull,
    /// Score-function gradient for proposals without reparameterization.
    ScoreFunction,
}

impl GradientVariant {
    pub fn name(&self) -> &'static str {
        match self {
            GradientVariant::ReparamBiased => "reparam_biased",
            GradientVariant::ReparamFull => "reparam_full",
            GradientVariant::ScoreFunction => "score_function",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub d_theta: Vec<f64>,
    pub d_phi: Vec<f64>,
    pub variant: GradientVariant,
    /// The objective value of the same run.
    pub log_phat: f64,
}

impl GradientEstimate {
    /// `[d_theta, d_phi]`.
    pub fn stacked(&self) -> Vec<f64> {
        self.d_theta.iter().chain(&self.d_phi).copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.stacked().iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    fn from_stacked(g: Vec<f64>, n_theta: usize, variant: GradientVariant, log_phat: f64) -> Self {
        let d_phi = g[n_theta..].to_vec();
        let mut d_theta = g;
        d_theta.truncate(n_theta);
        Self {
            d_theta,
            d_phi,
            variant,
            log_phat,
        }
    }
}

/// Per-coordinate mean and variance over replicate gradient estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSummary {
    pub variant: GradientVariant,
    pub replicates: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub std_error: Vec<f64>,
}

pub fn summarize_gradients(estimates: &[GradientEstimate]) -> Result<GradientSummary> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::Usage("no gradient estimates".into()))?;
    let stacked: Vec<Vec<f64>> = estimates.iter().map(GradientEstimate::stacked).collect();
    let dim = stacked[0].len();
    let mut out = GradientSummary {
        variant: first.variant,
        replicates: estimates.len(),
        mean: Vec::with_capacity(dim),
        variance: Vec::with_capacity(dim),
        std_error: Vec::with_capacity(dim),
    };
    for k in 0..dim {
        let col: Vec<f64> = stacked.iter().map(|g| g[k]).collect();
        let s = summarize(&col)?;
        out.mean.push(s.mean);
        out.variance.push(s.var);
        out.std_error.push(s.se_mean);
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Particles move with the parameters through their recorded noise.
    Pathwise,
    /// Particle values are held fixed.
    FixedSamples,
}

struct Propagation {
    /// `∇ log p̂_N` under the chosen mode.
    grad: Vec<f64>,
    /// `log p̂_t` per step.
    increments: Vec<f64>,
    /// `(t, Σ_i ∇ log w_t^{a_t(i)})` at each resampling step.
    resample_scores: Vec<(usize, Vec<f64>)>,
    /// `Σ_i ∇ log q_t(z_t^i | ·)` per step (fixed-sample mode only).
    proposal_scores: Vec<Vec<f64>>,
}

fn check_record<M: SequentialModel, P: Proposal<M>>(
    record: &FilterRecord,
    model: &M,
    proposal: &P,
    x: &[f64],
) -> Result<()> {
    if record.steps.len() != x.len() {
        return usage("record length does not match the observations");
    }
    if record.steps.iter().any(|s| s.particles.len() != record.n_particles) {
        return usage("record particle arrays do not match the particle count");
    }
    let _ = (model, proposal);
    Ok(())
}

fn propagate<M: SequentialModel, P: Proposal<M>>(
    record: &FilterRecord,
    model: &M,
    proposal: &P,
    x: &[f64],
    mode: Mode,
) -> Result<Propagation> {
    check_record(record, model, proposal, x)?;
    let n = record.n_particles;
    let n_theta = model.num_params();
    let dim = n_theta + proposal.num_params();
    let zeros = vec![0.0; dim];
    let mut out = Propagation {
        grad: vec![0.0; dim],
        increments: Vec::with_capacity(x.len()),
        resample_scores: Vec::new(),
        proposal_scores: Vec::new(),
    };
    let mut prev_dz: Vec<Vec<f64>> = Vec::new();
    let mut prev_dlw: Vec<Vec<f64>> = vec![zeros.clone(); n];
    for (t, step) in record.steps.iter().enumerate() {
        let reset = t == 0 || record.steps[t - 1].resampled;
        let mut dz_cur = Vec::with_capacity(n);
        let mut dlw = Vec::with_capacity(n);
        let mut q_score = zeros.clone();
        for i in 0..n {
            let parent = record.parent(t, i);
            let z_prev = (t > 0).then(|| record.steps[t - 1].particles[parent]);
            let dzp: &[f64] = if t > 0 && mode == Mode::Pathwise {
                &prev_dz[parent]
            } else {
                &zeros
            };
            let g = proposal.conditional_grad(model, t, x, z_prev);
            let iz = g.zprev_index();
            let z = step.particles[i];
            let s = g.log_std.exp();
            let eps = step.noises[i];
            let mut dm = vec![0.0; dim];
            let mut dls = vec![0.0; dim];
            let mut dz = vec![0.0; dim];
            for k in 0..dim {
                dm[k] = g.d_mean[k] + g.d_mean[iz] * dzp[k];
                dls[k] = g.d_log_std[k] + g.d_log_std[iz] * dzp[k];
                if mode == Mode::Pathwise {
                    dz[k] = dm[k] + s * eps * dls[k];
                }
            }
            let jg = model.log_joint_step_grad(t, x, z_prev, z);
            let (gm, gls, gz) = log_normal_partials(z, g.mean, g.log_std);
            let live = step.log_weights[i] > f64::NEG_INFINITY;
            let carried = if reset { &zeros } else { &prev_dlw[i] };
            let mut d = vec![0.0; dim];
            for k in 0..dim {
                let dlogq = gm * dm[k] + gls * dls[k] + gz * dz[k];
                let mut dlogp = jg.d_z * dz[k] + jg.d_zprev * dzp[k];
                if k < n_theta {
                    dlogp += jg.d_theta[k];
                }
                if mode == Mode::FixedSamples {
                    q_score[k] += dlogq;
                }
                d[k] = carried[k] + if live { dlogp - dlogq } else { 0.0 };
            }
            dz_cur.push(dz);
            dlw.push(d);
        }
        let w: Vec<f64> = step.log_weights.iter().map(|v| v.exp()).collect();
        let mut d_inc = zeros.clone();
        for (wi, di) in w.iter().zip(&dlw) {
            if *wi > 0.0 {
                for k in 0..dim {
                    d_inc[k] += wi * di[k];
                }
            }
        }
        for di in dlw.iter_mut() {
            for k in 0..dim {
                di[k] -= d_inc[k];
            }
        }
        for k in 0..dim {
            out.grad[k] += d_inc[k];
        }
        out.increments.push(step.log_phat_increment);
        if let Some(anc) = &step.ancestors {
            let mut score = zeros.clone();
            for &a in anc {
                for k in 0..dim {
                    score[k] += dlw[a][k];
                }
            }
            out.resample_scores.push((t, score));
        }
        if mode == Mode::FixedSamples {
            out.proposal_scores.push(q_score);
        }
        prev_dz = dz_cur;
        prev_dlw = dlw;
    }
    Ok(out)
}

fn require_reparameterized<M: SequentialModel, P: Proposal<M>>(proposal: &P) -> Result<()> {
    if proposal.is_reparameterized() {
        Ok(())
    } else {
        Err(Error::Unsupported(
            "pathwise gradients need a reparameterized proposal; use the score-function variant".into(),
        ))
    }
}

fn require_fixed(record: &FilterRecord) -> Result<()> {
    if record.policy.is_fixed() {
        Ok(())
    } else {
        Err(Error::Unsupported(
            "resampling score terms need a fixed schedule; adaptive-boundary terms are not estimated".into(),
        ))
    }
}

/// `∇_{θ,φ} log p̂_N` with noises and ancestor indices held fixed.
pub fn grad_log_phat_reparam<M: SequentialModel, P: Proposal<M>>(
    record: &FilterRecord,
    model: &M,
    proposal: &P,
    x: &[f64],
) -> Result<GradientEstimate> {
    require_reparameterized::<M, P>(proposal)?;
    let p = propagate(record, model, proposal, x, Mode::Pathwise)?;
    Ok(GradientEstimate::from_stacked(
        p.grad,
        model.num_params(),
        GradientVariant::ReparamBiased,
        record.log_phat,
    ))
}

fn prefix_sums(increments: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(increments.len() + 1);
    out.push(0.0);
    for v in increments {
        acc += v;
        out.push(acc);
    }
    out
}

/// Pathwise gradient plus `Σ_{t resampled} log(p̂_N(x_{1:T}) / p̂_N(x_{1:t}))
/// Σ_i ∇ log w_t^{a_t(i)}`. Unbiased under a fixed schedule.
pub fn grad_fivo_full<M: SequentialModel, P: Proposal<M>>(
    record: &FilterRecord,
    model: &M,
    proposal: &P,
    x: &[f64],
) -> Result<GradientEstimate> {
    require_reparameterized::<M, P>(proposal)?;
    require_fixed(record)?;
    let p = propagate(record, model, proposal, x, Mode::Pathwise)?;
    let cum = prefix_sums(&p.increments);
    let total = record.log_phat;
    let mut g = p.grad;
    for (t, score) in &p.resample_scores {
        let factor = total - cum[t + 1];
        for (gk, sk) in g.iter_mut().zip(score) {
            *gk += factor * sk;
        }
    }
    Ok(GradientEstimate::from_stacked(
        g,
        model.num_params(),
        GradientVariant::ReparamFull,
        record.log_phat,
    ))
}

/// Per-step exponential moving averages of the score-term multipliers,
/// subtracted as control variates. Each average is updated after it is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovingAverageBaseline {
    pub decay: f64,
    proposal: Vec<Option<f64>>,
    resample: Vec<Option<f64>>,
}

impl MovingAverageBaseline {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return usage(format!("baseline decay must lie in [0, 1), got {decay}"));
        }
        Ok(Self {
            decay,
            proposal: Vec::new(),
            resample: Vec::new(),
        })
    }

    fn apply(slots: &mut Vec<Option<f64>>, decay: f64, t: usize, value: f64) -> f64 {
        if slots.len() <= t {
            slots.resize(t + 1, None);
        }
        let b = slots[t].unwrap_or(0.0);
        slots[t] = Some(match slots[t] {
            None => value,
            Some(old) => decay * old + (1.0 - decay) * value,
        });
        value - b
    }
}

/// Score-function estimator: the gradient with samples held fixed, plus
/// `Σ_t log(p̂_N(x_{1:T}) / p̂_N(x_{1:t-1})) Σ_i ∇ log q_t(z_t^i | ·)`, plus
/// the resampling score terms.
pub fn grad_score_function<M: SequentialModel, P: Proposal<M>>(
    record: &FilterRecord,
    model: &M,
    proposal: &P,
    x: &[f64],
    mut baseline: Option<&mut MovingAverageBaseline>,
) -> Result<GradientEstimate> {
    require_fixed(record)?;
    let p = propagate(record, model, proposal, x, Mode::FixedSamples)?;
    let cum = prefix_sums(&p.increments);
    let total = record.log_phat;
    let mut g = p.grad;
    for (t, score) in p.proposal_scores.iter().enumerate() {
        let mut factor = total - cum[t];
        if let Some(b) = baseline.as_deref_mut() {
            factor = MovingAverageBaseline::apply(&mut b.proposal, b.decay, t, factor);
        }
        for (gk, sk) in g.iter_mut().zip(score) {
            *gk += factor * sk;
        }
    }
    for (t, score) in &p.resample_scores {
        let mut factor = total - cum[t + 1];
        if let Some(b) = baseline.as_deref_mut() {
            factor = MovingAverageBaseline::apply(&mut b.resample, b.decay, *t, factor);
        }
        for (gk, sk) in g.iter_mut().zip(score) {
            *gk += factor * sk;
        }
    }
    Ok(GradientEstimate::from_stacked(
        g,
        model.num_params(),
        GradientVariant::ScoreFunction,
        record.log_phat,
    ))
}

/// Run a filter and apply the chosen estimator.
#[allow(clippy::too_many_arguments)]
pub fn fivo_gradient<M: SequentialModel, P: Proposal<M>>(
    variant: GradientVariant,
    model: &M,
    proposal: &P,
    x: &[f64],
    n: usize,
    policy: &ResamplingPolicy,
    rng: &RngStream,
    baseline: Option<&mut MovingAverageBaseline>,
) -> Result<GradientEstimate> {
    let record = run_particle_filter(model, proposal, x, n, policy, rng)?;
    match variant {
        GradientVariant::ReparamBiased => grad_log_phat_reparam(&record, model, proposal, x),
        GradientVariant::ReparamFull => grad_fivo_full(&record, model, proposal, x),
        GradientVariant::ScoreFunction => grad_score_function(&record, model, proposal, x, baseline),
    }
}

/// Pathwise gradient of the IWAE estimator (`n = 1` gives the ELBO), computed
/// path by path without the filter.
pub fn grad_iwae_reparam<M: SequentialModel, P: Proposal<M>>(
    model: &M,
    proposal: &P,
    x: &[f64],
    n: usize,
    rng: &RngStream,
) -> Result<GradientEstimate> {
    require_reparameterized::<M, P>(proposal)?;
    if n == 0 || x.is_empty() {
        return usage("IWAE gradient needs n ≥ 1 and a non-empty sequence");
    }
    let n_theta = model.num_params();
    let dim = n_theta + proposal.num_params();
    let mut log_w = Vec::with_capacity(n);
    let mut d_log_w = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let mut stream = rng.derive(stream_role::PROPOSAL, i);
        let (mut lw, mut dlw) = (0.0, vec![0.0; dim]);
        let mut z_prev: Option<f64> = None;
        let mut dzp = vec![0.0; dim];
        for t in 0..x.len() {
            let g = proposal.conditional_grad(model, t, x, z_prev);
            let q = g.gaussian();
            let eps = stream.standard_normal();
            let z = q.mean + q.std() * eps;
            let s = g.log_std.exp();
            let iz = g.zprev_index();
            let jg = model.log_joint_step_grad(t, x, z_prev, z);
            let la = jg.value - q.log_pdf(z);
            lw += if la.is_nan() { f64::NEG_INFINITY } else { la };
            let mut dz = vec![0.0; dim];
            for k in 0..dim {
                let dm = g.d_mean[k] + g.d_mean[iz] * dzp[k];
                let dls = g.d_log_std[k] + g.d_log_std[iz] * dzp[k];
                dz[k] = dm + s * eps * dls;
                // Along the reparameterized path, log q(z) changes only
                // through log σ.
                let dlogq = -dls;
                let mut dlogp = jg.d_z * dz[k] + jg.d_zprev * dzp[k];
                if k < n_theta {
                    dlogp += jg.d_theta[k];
                }
                dlw[k] += dlogp - dlogq;
            }
            z_prev = Some(z);
            dzp = dz;
        }
        log_w.push(lw);
        d_log_w.push(dlw);
    }
    let norm = lse_unchecked(&log_w);
    let mut g = vec![0.0; dim];
    for (lw, dlw) in log_w.iter().zip(&d_log_w) {
        let w = (lw - norm).exp();
        if w > 0.0 {
            for k in 0..dim {
                g[k] += w * dlw[k];
            }
        }
    }
    Ok(GradientEstimate::from_stacked(
        g,
        n_theta,
        GradientVariant::ReparamBiased,
        norm - (n as f64).ln(),
    ))
}

/// Model and proposal with stacked coordinate `k` shifted by `delta`.
pub fn perturb<M: SequentialModel, P: Proposal<M>>(model: &M, proposal: &P, k: usize, delta: f64) -> Result<(M, P)> {
    let mut theta = model.params();
    let mut phi = proposal.params();
    let nt = theta.len();
    if k < nt {
        theta[k] += delta;
    } else if k - nt < phi.len() {
        phi[k - nt] += delta;
    } else {
        return usage(format!("coordinate {k} out of range"));
    }
    Ok((model.with_params(&theta)?, proposal.with_params(&phi)?))
}

/// Central differences of a deterministic function.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, params: &[f64], step: f64) -> Vec<f64> {
    (0..params.len())
        .map(|k| {
            let (mut a, mut b) = (params.to_vec(), params.to_vec());
            a[k] += step;
            b[k] -= step;
            (f(&a) - f(&b)) / (2.0 * step)
        })
        .collect()
}

/// Central differences of `log p̂` for one record, replayed with its noises
/// and ancestors fixed.
pub fn replay_finite_difference<M: SequentialModel, P: Proposal<M>>(
    record: &FilterRecord,
    model: &M,
    proposal: &P,
    x: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    let dim = model.num_params() + proposal.num_params();
    (0..dim)
        .map(|k| {
            let (mp, pp) = perturb(model, proposal, k, step)?;
            let (mm, pm) = perturb(model, proposal, k, -step)?;
            let a = replay_log_phat(record, &mp, &pp, x)?;
            let b = replay_log_phat(record, &mm, &pm, x)?;
            Ok((a - b) / (2.0 * step))
        })
        .collect()
}

/// One row of a gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdRow {
    pub coordinate: usize,
    pub analytic: f64,
    pub analytic_se: f64,
    pub fd: f64,
    pub fd_se: f64,
    pub z_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub variant: GradientVariant,
    pub step: f64,
    pub replicates: usize,
    pub rows: Vec<FdRow>,
}

impl FdReport {
    pub fn max_abs_z(&self) -> f64 {
        self.rows.iter().map(|r| r.z_score.abs()).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("coordinate,analytic,fd,z_score,variant\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.coordinate,
                r.analytic,
                r.fd,
                r.z_score,
                self.variant.name()
            ));
        }
        s
    }
}

/// Mean of a gradient estimator against central differences of the mean
/// objective, both over `replicates` streams `rng.replicate(r)`. The finite
/// differences share streams across `±step` (common random numbers).
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check<M: SequentialModel, P: Proposal<M>>(
    objective: &ObjectiveSpec,
    variant: GradientVariant,
    model: &M,
    proposal: &P,
    x: &[f64],
    step: f64,
    replicates: usize,
    rng: &RngStream,
) -> Result<FdReport> {
    use rayon::prelude::*;
    if !(step > 0.0) {
        return usage("finite-difference step must be positive");
    }
    if replicates < 2 {
        return usage("at least 2 replicates are needed");
    }
    let (n, policy) = match objective {
        ObjectiveSpec::Elbo { samples: 1 } => (1, ResamplingPolicy::Never),
        ObjectiveSpec::Iwae { n_particles } => (*n_particles, ResamplingPolicy::Never),
        ObjectiveSpec::Fivo {
            n_particles, policy, ..
        } => (*n_particles, policy.clone()),
        _ => return usage("gradient checks support elbo, iwae and fivo objectives"),
    };
    let fivo = ObjectiveSpec::Fivo {
        n_particles: n,
        policy: policy.clone(),
        scheme: Default::default(),
    };
    let streams: Vec<RngStream> = (0..replicates as u64).map(|r| rng.replicate(r)).collect();
    let grads: Vec<GradientEstimate> = streams
        .par_iter()
        .map(|s| fivo_gradient(variant, model, proposal, x, n, &policy, s, None))
        .collect::<Result<_>>()?;
    let summary = summarize_gradients(&grads)?;
    let dim = model.num_params() + proposal.num_params();
    let mut rows = Vec::with_capacity(dim);
    for k in 0..dim {
        let (mp, pp) = perturb(model, proposal, k, step)?;
        let (mm, pm) = perturb(model, proposal, k, -step)?;
        let diffs: Vec<f64> = streams
            .par_iter()
            .map(|s| {
                let a = fivo.estimate(&mp, &pp, x, s)?;
                let b = fivo.estimate(&mm, &pm, x, s)?;
                Ok((a - b) / (2.0 * step))
            })
            .collect::<Result<_>>()?;
        let fd = summarize(&diffs)?;
        let (a, ase) = (summary.mean[k], summary.std_error[k]);
        let se = (ase * ase + fd.se_mean * fd.se_mean).sqrt();
        let z = if se > 0.0 {
            (a - fd.mean) / se
        } else if a == fd.mean {
            0.0
        } else {
            f64::INFINITY
        };
        rows.push(FdRow {
            coordinate: k,
            analytic: a,
            analytic_se: ase,
            fd: fd.mean,
            fd_se: fd.se_mean,
            z_score: z,
        });
    }
    Ok(FdReport {
        variant,
        step,
        replicates,
        rows,
    })
}
