//! Conditional SMC and the extended-space densities that express `p̂_N` as
//! a single importance weight: `p̂_N = p(x) f / g`, where `g` is the joint
//! density of a filter run and `f` the density of the same variables under
//! conditional SMC with a privileged posterior trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::models::{ConjugateIndependenceModel, OptimalFilterProposal, Proposal, SequentialModel};
use crate::numerics::{Gaussian, RngStream};
use crate::oracles::KalmanSmoother;
use crate::smc::{check_inputs, run_core, Driver, FilterRecord, LiveDriver, ResamplingPolicy, ResamplingScheme};

/// Exact posterior conditionals `p(z_t | z_{t-1}, x_{1:T})` of a Markov
/// latent chain.
pub trait PosteriorConditionals {
    fn len(&self) -> usize;

    fn conditional(&self, t: usize, z_prev: Option<f64>) -> Gaussian;

    /// Ancestral draw of a whole trajectory.
    fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let mut y: Vec<f64> = Vec::with_capacity(self.len());
        for t in 0..self.len() {
            let z_prev = y.last().copied();
            y.push(self.conditional(t, z_prev).sample(rng));
        }
        y
    }

    fn log_density(&self, y: &[f64]) -> f64 {
        (0..y.len())
            .map(|t| self.conditional(t, (t > 0).then(|| y[t - 1])).log_pdf(y[t]))
            .sum()
    }
}

impl PosteriorConditionals for KalmanSmoother {
    fn len(&self) -> usize {
        self.mean.len()
    }

    fn conditional(&self, t: usize, z_prev: Option<f64>) -> Gaussian {
        KalmanSmoother::conditional(self, t, z_prev)
    }
}

/// Per-step posteriors of the conjugate independence model; they do not
/// depend on the previous latent.
#[derive(Clone, Debug, PartialEq)]
pub struct IndependentPosterior {
    pub marginals: Vec<Gaussian>,
}

impl IndependentPosterior {
    pub fn conjugate(model: &ConjugateIndependenceModel, x: &[f64]) -> Self {
        let marginals = (0..x.len())
            .map(|t| Proposal::<ConjugateIndependenceModel>::conditional(&OptimalFilterProposal, model, t, x, None))
            .collect();
        Self { marginals }
    }
}

impl PosteriorConditionals for IndependentPosterior {
    fn len(&self) -> usize {
        self.marginals.len()
    }

    fn conditional(&self, t: usize, _z_prev: Option<f64>) -> Gaussian {
        self.marginals[t]
    }
}

/// Privileged trajectory and slot bookkeeping laid over a filter record.
///
/// `slots[0]` is the privileged slot of the first block; `slots[r]` is the
/// slot selected after the `r`-th resampling event, whose ancestor must be
/// `slots[r - 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsmcOverlay {
    pub y: Vec<f64>,
    pub slots: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsmcRecord {
    pub record: FilterRecord,
    pub overlay: CsmcOverlay,
}

impl CsmcRecord {
    /// The privileged slot holds `y_{1:t}` in every block.
    pub fn check_invariant(&self) -> bool {
        check_overlay(&self.record, &self.overlay).is_ok()
    }
}

/// Resampling steps (0-based) of a fixed schedule that must end at `T`.
fn blocks(record: &FilterRecord) -> Result<Vec<usize>> {
    let len = record.len();
    let Some(schedule) = record.policy.schedule(len) else {
        return usage("extended-space densities need a fixed resampling schedule");
    };
    if !schedule.contains(&len) {
        return usage("the resampling schedule must include the final step");
    }
    let ends: Vec<usize> = schedule.iter().map(|s| s - 1).collect();
    let recorded: Vec<usize> = record
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.resampled)
        .map(|(t, _)| t)
        .collect();
    if recorded != ends {
        return usage("record resampling steps do not match its schedule");
    }
    Ok(ends)
}

fn check_overlay(record: &FilterRecord, overlay: &CsmcOverlay) -> Result<Vec<usize>> {
    let ends = blocks(record)?;
    let n = record.n_particles;
    if overlay.y.len() != record.len() {
        return usage("privileged trajectory length does not match the record");
    }
    if overlay.slots.len() != ends.len() + 1 || overlay.slots.iter().any(|&j| j >= n) {
        return usage("overlay needs one slot per block plus the final selection");
    }
    let mut start = 0;
    for (r, &end) in ends.iter().enumerate() {
        let j = overlay.slots[r];
        for t in start..=end {
            if record.steps[t].particles[j] != overlay.y[t] {
                return usage(format!("privileged slot does not hold y at step {}", t + 1));
            }
        }
        let anc = record.steps[end]
            .ancestors
            .as_ref()
            .expect("resampled step has ancestors");
        if anc[overlay.slots[r + 1]] != j {
            return usage(format!("selected slot after step {} does not descend from y", end + 1));
        }
        start = end + 1;
    }
    Ok(ends)
}

/// Overlay reading `y` off the lineage of post-resampling slot `final_slot`
/// at step `T`, so that any filter record becomes a point of both densities.
pub fn overlay_from_lineage(record: &FilterRecord, final_slot: usize) -> Result<CsmcOverlay> {
    let ends = blocks(record)?;
    if final_slot >= record.n_particles {
        return usage("final slot out of range");
    }
    let len = record.len();
    let mut y = vec![0.0; len];
    let mut slots = vec![0; ends.len() + 1];
    slots[ends.len()] = final_slot;
    let mut idx = record.steps[len - 1].ancestors.as_ref().expect("resampled at T")[final_slot];
    let mut r = ends.len();
    for t in (0..len).rev() {
        if r > 0 && (r == 1 || t > ends[r - 2]) {
            slots[r - 1] = idx;
        }
        if r > 1 && t == ends[r - 2] + 1 {
            r -= 1;
        }
        y[t] = record.steps[t].particles[idx];
        idx = record.parent(t, idx);
    }
    let overlay = CsmcOverlay { y, slots };
    check_overlay(record, &overlay)?;
    Ok(overlay)
}

struct CsmcDriver<'a, 'b> {
    live: LiveDriver<'a>,
    y: &'b [f64],
    slot: usize,
    slots: Vec<usize>,
}

impl Driver for CsmcDriver<'_, '_> {
    fn noise(&mut self, t: usize, i: usize) -> f64 {
        self.live.noise(t, i)
    }

    fn pinned(&self, t: usize, i: usize) -> Option<f64> {
        (i == self.slot).then(|| self.y[t])
    }

    fn resample(&mut self, step: usize, weights: &[f64], ess: f64) -> Option<Vec<usize>> {
        let mut anc = self.live.resample(step, weights, ess)?;
        let j = self.live.uniform_slot(weights.len());
        anc[j] = self.slot;
        self.slot = j;
        self.slots.push(j);
        Some(anc)
    }
}

/// Conditional SMC: slot 0 starts privileged and holds `y`; after every
/// resampling event a uniformly chosen slot inherits the privileged lineage.
#[allow(clippy::too_many_arguments)]
pub fn run_csmc<M: SequentialModel, P: Proposal<M>>(
    model: &M,
    proposal: &P,
    x: &[f64],
    n: usize,
    policy: &ResamplingPolicy,
    y: &[f64],
    rng: &RngStream,
) -> Result<CsmcRecord> {
    check_inputs(x, n, policy)?;
    match policy.schedule(x.len()) {
        Some(s) if s.contains(&x.len()) => {}
        _ => return usage("conditional SMC needs a fixed schedule that resamples at the final step"),
    }
    if y.len() != x.len() {
        return usage("privileged trajectory length does not match the observations");
    }
    let mut driver = CsmcDriver {
        live: LiveDriver::new(rng, n, policy, ResamplingScheme::Multinomial),
        y,
        slot: 0,
        slots: vec![0],
    };
    let record = run_core(model, proposal, x, n, policy, &mut driver, None, true)?;
    Ok(CsmcRecord {
        record,
        overlay: CsmcOverlay {
            y: y.to_vec(),
            slots: driver.slots,
        },
    })
}

fn log_q<M: SequentialModel, P: Proposal<M>>(
    model: &M,
    proposal: &P,
    x: &[f64],
    record: &FilterRecord,
    t: usize,
    i: usize,
) -> f64 {
    let z_prev = (t > 0).then(|| record.steps[t - 1].particles[record.parent(t, i)]);
    proposal
        .conditional(model, t, x, z_prev)
        .log_pdf(record.steps[t].particles[i])
}

fn check_dims(record: &FilterRecord, x: &[f64]) -> Result<()> {
    if record.len() != x.len() {
        return usage("record length does not match the observations");
    }
    Ok(())
}

/// `log g`: proposal densities of every particle plus the probabilities of
/// every ancestor draw.
pub fn extended_log_density_g<M: SequentialModel, P: Proposal<M>>(
    model: &M,
    proposal: &P,
    x: &[f64],
    record: &FilterRecord,
) -> Result<f64> {
    check_dims(record, x)?;
    blocks(record)?;
    let mut total = 0.0;
    for (t, step) in record.steps.iter().enumerate() {
        for i in 0..record.n_particles {
            total += log_q(model, proposal, x, record, t, i);
        }
        if let Some(anc) = &step.ancestors {
            total += anc.iter().map(|&a| step.log_weights[a]).sum::<f64>();
        }
    }
    Ok(total)
}

/// `log f`: as `log g` but the privileged slot contributes posterior
/// conditionals instead of proposal densities, and its selection after each
/// resampling event contributes `1/N` instead of an ancestor weight.
pub fn extended_log_density_f<M: SequentialModel, P: Proposal<M>, C: PosteriorConditionals>(
    model: &M,
    proposal: &P,
    x: &[f64],
    record: &FilterRecord,
    overlay: &CsmcOverlay,
    posterior: &C,
) -> Result<f64> {
    check_dims(record, x)?;
    let ends = check_overlay(record, overlay)?;
    if posterior.len() != x.len() {
        return usage("posterior conditionals do not match the sequence length");
    }
    let n = record.n_particles;
    let ln_n = (n as f64).ln();
    let mut total = 0.0;
    let mut start = 0;
    for (r, &end) in ends.iter().enumerate() {
        let j = overlay.slots[r];
        for t in start..=end {
            for i in (0..n).filter(|&i| i != j) {
                total += log_q(model, proposal, x, record, t, i);
            }
            let y_prev = (t > 0).then(|| overlay.y[t - 1]);
            total += posterior.conditional(t, y_prev).log_pdf(overlay.y[t]);
        }
        let step = &record.steps[end];
        let anc = step.ancestors.as_ref().expect("resampled step has ancestors");
        let chosen = overlay.slots[r + 1];
        total += anc
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != chosen)
            .map(|(_, &a)| step.log_weights[a])
            .sum::<f64>();
        total -= ln_n;
        start = end + 1;
    }
    Ok(total)
}

/// `|log p(x) + log f - log g - log p̂_N|`.
pub fn verify_unbiasedness_identity<M: SequentialModel, P: Proposal<M>, C: PosteriorConditionals>(
    model: &M,
    proposal: &P,
    x: &[f64],
    record: &FilterRecord,
    overlay: &CsmcOverlay,
    posterior: &C,
    oracle_log_px: f64,
) -> Result<f64> {
    let f = extended_log_density_f(model, proposal, x, record, overlay, posterior)?;
    let g = extended_log_density_g(model, proposal, x, record)?;
    Ok((oracle_log_px + f - g - record.log_phat).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BootstrapProposal, LearnedGaussian, Lgssm, LgssmParams};
    use crate::numerics::{lse_unchecked, stream_role};
    use crate::oracles::{kalman_log_marginal, rts_smoother};
    use crate::smc::run_particle_filter;
    use crate::stats::{ks_two_sample, summarize};

    fn params() -> LgssmParams {
        LgssmParams::new(0.9, 1.2, 0.8, 0.6, 1.1).unwrap()
    }

    fn setup(len: usize, seed: u64) -> (Lgssm, Vec<f64>, KalmanSmoother, f64) {
        let m = Lgssm::new(params()).unwrap();
        let x = m.sample(len, &mut RngStream::new(seed, 99)).0;
        let sm = rts_smoother(&params(), &x).unwrap();
        let lp = kalman_log_marginal(&params(), &x).unwrap().log_marginal;
        (m, x, sm, lp)
    }

    #[test]
    fn single_particle_is_the_privileged_trajectory() {
        let (m, x, sm, _) = setup(3, 1);
        let y = sm.sample(&mut RngStream::new(4, 4));
        let c = run_csmc(
            &m,
            &BootstrapProposal,
            &x,
            1,
            &ResamplingPolicy::Always,
            &y,
            &RngStream::new(5, 0),
        )
        .unwrap();
        let traj = c.record.trajectories();
        assert_eq!(traj[0], y);
        let expected: f64 = (0..3)
            .map(|t| {
                let zp = (t > 0).then(|| y[t - 1]);
                m.log_joint_step(t, &x, zp, y[t])
                    - Proposal::<Lgssm>::conditional(&BootstrapProposal, &m, t, &x, zp).log_pdf(y[t])
            })
            .sum();
        assert!((c.record.log_phat - expected).abs() < 1e-12);
        // log f with N = 1 is the posterior density of y.
        let f = extended_log_density_f(&m, &BootstrapProposal, &x, &c.record, &c.overlay, &sm).unwrap();
        assert!((f - sm.log_density(&y)).abs() < 1e-12);
    }

    #[test]
    fn privileged_slot_invariant_holds() {
        let (m, x, sm, _) = setup(6, 2);
        for seed in 0..20 {
            let y = sm.sample(&mut RngStream::new(seed, 1));
            let c = run_csmc(
                &m,
                &BootstrapProposal,
                &x,
                4,
                &ResamplingPolicy::fixed([2, 3, 6]),
                &y,
                &RngStream::new(seed, 2),
            )
            .unwrap();
            assert!(c.check_invariant());
            assert_eq!(c.overlay.slots.len(), 4);
            assert_eq!(c.overlay.slots[0], 0);
        }
    }

    #[test]
    fn schedule_without_final_step_refused() {
        let (m, x, sm, _) = setup(3, 3);
        let y = sm.sample(&mut RngStream::new(1, 1));
        for policy in [
            ResamplingPolicy::fixed([1]),
            ResamplingPolicy::default(),
            ResamplingPolicy::Never,
        ] {
            assert!(run_csmc(&m, &BootstrapProposal, &x, 2, &policy, &y, &RngStream::new(1, 0)).is_err());
        }
        let r = run_particle_filter(
            &m,
            &BootstrapProposal,
            &x,
            2,
            &ResamplingPolicy::fixed([1]),
            &RngStream::new(1, 0),
        )
        .unwrap();
        assert!(extended_log_density_g(&m, &BootstrapProposal, &x, &r).is_err());
    }

    #[test]
    fn g_for_single_step_single_particle() {
        let (m, x, _, _) = setup(1, 4);
        let r = run_particle_filter(
            &m,
            &BootstrapProposal,
            &x,
            1,
            &ResamplingPolicy::Always,
            &RngStream::new(2, 0),
        )
        .unwrap();
        let z = r.steps[0].particles[0];
        let q = Proposal::<Lgssm>::conditional(&BootstrapProposal, &m, 0, &x, None);
        let g = extended_log_density_g(&m, &BootstrapProposal, &x, &r).unwrap();
        assert!((g - q.log_pdf(z)).abs() < 1e-14);
    }

    #[test]
    fn g_matches_hand_expansion_two_by_two() {
        let (m, x, _, _) = setup(2, 5);
        let q = LearnedGaussian {
            mean_bias: 0.2,
            log_std_x: 0.1,
            ..Default::default()
        };
        let r = run_particle_filter(&m, &q, &x, 2, &ResamplingPolicy::fixed([1, 2]), &RngStream::new(7, 0)).unwrap();
        let z1 = &r.steps[0].particles;
        let z2 = &r.steps[1].particles;
        let a1 = r.steps[0].ancestors.clone().unwrap();
        let a2 = r.steps[1].ancestors.clone().unwrap();
        let qd = |t: usize, zp: Option<f64>, z: f64| Proposal::<Lgssm>::conditional(&q, &m, t, &x, zp).log_pdf(z);
        let alpha = |t: usize, zp: Option<f64>, z: f64| m.log_joint_step(t, &x, zp, z) - qd(t, zp, z);
        let lw1: Vec<f64> = (0..2).map(|i| alpha(0, None, z1[i])).collect();
        let n1 = lse_unchecked(&lw1);
        let lw2: Vec<f64> = (0..2).map(|i| alpha(1, Some(z1[a1[i]]), z2[i])).collect();
        let n2 = lse_unchecked(&lw2);
        let expected = qd(0, None, z1[0])
            + qd(0, None, z1[1])
            + (lw1[a1[0]] - n1)
            + (lw1[a1[1]] - n1)
            + qd(1, Some(z1[a1[0]]), z2[0])
            + qd(1, Some(z1[a1[1]]), z2[1])
            + (lw2[a2[0]] - n2)
            + (lw2[a2[1]] - n2);
        let g = extended_log_density_g(&m, &q, &x, &r).unwrap();
        assert!((g - expected).abs() < 1e-12, "{g} vs {expected}");
    }

    fn identity_residual(len: usize, n: usize, steps: &[usize], seed: u64) -> f64 {
        let (m, x, sm, lp) = setup(len, seed);
        let r = run_particle_filter(
            &m,
            &BootstrapProposal,
            &x,
            n,
            &ResamplingPolicy::fixed(steps.iter().copied()),
            &RngStream::new(seed, 1),
        )
        .unwrap();
        let ov = overlay_from_lineage(&r, (seed as usize) % n).unwrap();
        verify_unbiasedness_identity(&m, &BootstrapProposal, &x, &r, &ov, &sm, lp).unwrap()
    }

    #[test]
    fn identity_on_small_lgssm_instances() {
        assert!(identity_residual(2, 2, &[1, 2], 11) < 1e-10);
        assert!(identity_residual(3, 3, &[2, 3], 12) < 1e-10);
    }

    #[test]
    fn identity_on_randomized_instances() {
        let mut rng = RngStream::new(2024, 0);
        for k in 0..100 {
            let len = 1 + rng.below(3);
            let n = 1 + rng.below(4);
            let mut steps: Vec<usize> = (1..len).filter(|_| rng.uniform() < 0.5).collect();
            steps.push(len);
            let res = identity_residual(len, n, &steps, 100 + k);
            assert!(res < 1e-10, "instance {k}: residual {res}");
        }
    }

    #[test]
    fn identity_holds_on_csmc_records() {
        let (m, x, sm, lp) = setup(3, 13);
        let q = LearnedGaussian {
            mean_x: 0.3,
            ..Default::default()
        };
        for seed in 0..10 {
            let y = sm.sample(&mut RngStream::new(seed, 7));
            let c = run_csmc(&m, &q, &x, 3, &ResamplingPolicy::Always, &y, &RngStream::new(seed, 8)).unwrap();
            let res = verify_unbiasedness_identity(&m, &q, &x, &c.record, &c.overlay, &sm, lp).unwrap();
            assert!(res < 1e-10, "{res}");
        }
    }

    #[test]
    fn conjugate_exact_posterior_identity_is_sharp() {
        let m = ConjugateIndependenceModel::new(0.3, -0.5, 0.9, 0.4).unwrap();
        let x = m.sample(3, &mut RngStream::new(1, 1)).0;
        let post = IndependentPosterior::conjugate(&m, &x);
        let lp = m.exact_log_marginal(&x).unwrap().log_marginal;
        let r = run_particle_filter(
            &m,
            &OptimalFilterProposal,
            &x,
            4,
            &ResamplingPolicy::fixed([2, 3]),
            &RngStream::new(3, 3),
        )
        .unwrap();
        let ov = overlay_from_lineage(&r, 2).unwrap();
        let res = verify_unbiasedness_identity(&m, &OptimalFilterProposal, &x, &r, &ov, &post, lp).unwrap();
        assert!(res < 1e-10);
        assert!((r.log_phat - lp).abs() < 1e-10);
    }

    #[test]
    fn importance_weights_f_over_g_average_to_one() {
        let (m, x, sm, lp) = setup(3, 14);
        let policy = ResamplingPolicy::fixed([2, 3]);
        let ratios: Vec<f64> = (0..20_000u64)
            .map(|s| {
                let rng = RngStream::new(77, s);
                let r = run_particle_filter(&m, &BootstrapProposal, &x, 3, &policy, &rng).unwrap();
                let slot = rng.derive(stream_role::AUX, 0).below(3);
                let ov = overlay_from_lineage(&r, slot).unwrap();
                let f = extended_log_density_f(&m, &BootstrapProposal, &x, &r, &ov, &sm).unwrap();
                let g = extended_log_density_g(&m, &BootstrapProposal, &x, &r).unwrap();
                (f - g).exp()
            })
            .collect();
        let s = summarize(&ratios).unwrap();
        assert!((s.mean - 1.0).abs() < 3.0 * s.se_mean, "{} ± {}", s.mean, s.se_mean);
        let _ = lp;
    }

    #[test]
    fn posterior_conditionals_match_smoother() {
        let (_, x, sm, _) = setup(4, 15);
        let p = params();
        let post = crate::models::smoothing_proposal(&p, Some(0.4), &x[2..]).unwrap();
        let c = PosteriorConditionals::conditional(&sm, 2, Some(0.4));
        assert!((post.mean - c.mean).abs() < 1e-10 && (post.var - c.var).abs() < 1e-10);
    }

    #[test]
    fn free_particles_at_first_step_match_filter() {
        let (m, x, sm, _) = setup(3, 16);
        let policy = ResamplingPolicy::Always;
        let mut free = Vec::new();
        let mut plain = Vec::new();
        for s in 0..10_000u64 {
            let y = sm.sample(&mut RngStream::new(s, 1));
            let c = run_csmc(&m, &BootstrapProposal, &x, 4, &policy, &y, &RngStream::new(s, 2)).unwrap();
            free.push(c.record.steps[0].particles[1]);
            let r = run_particle_filter(&m, &BootstrapProposal, &x, 4, &policy, &RngStream::new(s, 3)).unwrap();
            plain.push(r.steps[0].particles[1]);
        }
        let (_, p) = ks_two_sample(&free, &plain).unwrap();
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn overlay_mismatch_rejected() {
        let (m, x, sm, lp) = setup(3, 17);
        let r = run_particle_filter(
            &m,
            &BootstrapProposal,
            &x,
            3,
            &ResamplingPolicy::Always,
            &RngStream::new(1, 1),
        )
        .unwrap();
        let mut ov = overlay_from_lineage(&r, 0).unwrap();
        ov.y[1] += 0.1;
        assert!(verify_unbiasedness_identity(&m, &BootstrapProposal, &x, &r, &ov, &sm, lp).is_err());
    }
}
