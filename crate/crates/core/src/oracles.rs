//! Exact and brute-force references for `log p(x_{1:T})`.
//!
//! Kalman filtering and the conjugate closed form are exact; tensor-grid
//! quadrature covers the nonlinear model for very short sequences.

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::models::{ConjugateIndependenceModel, LgssmParams, SequentialModel};
use crate::numerics::{log_normal_pdf, lse_unchecked, Gaussian, RngStream};

/// Longest sequence the quadrature oracle accepts.
pub const MAX_QUADRATURE_T: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    Kalman,
    Conjugate,
    Quadrature,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub log_marginal: f64,
    pub method: OracleMethod,
    /// Zero for exact methods; for quadrature, the change in the result when
    /// the grid step is doubled.
    pub error_bound: f64,
}

impl OracleResult {
    fn exact(log_marginal: f64, method: OracleMethod) -> Self {
        Self {
            log_marginal,
            method,
            error_bound: 0.0,
        }
    }
}

fn check_observations(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return usage("observation sequence is empty");
    }
    if x.iter().any(|v| !v.is_finite()) {
        return usage("observations must be finite");
    }
    Ok(())
}

/// Forward Kalman filter moments.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanFilter {
    pub predicted_mean: Vec<f64>,
    pub predicted_var: Vec<f64>,
    pub filtered_mean: Vec<f64>,
    pub filtered_var: Vec<f64>,
    pub log_marginal: f64,
}

pub fn kalman_filter(p: &LgssmParams, x: &[f64]) -> Result<KalmanFilter> {
    p.validate()?;
    check_observations(x)?;
    let n = x.len();
    let mut out = KalmanFilter {
        predicted_mean: Vec::with_capacity(n),
        predicted_var: Vec::with_capacity(n),
        filtered_mean: Vec::with_capacity(n),
        filtered_var: Vec::with_capacity(n),
        log_marginal: 0.0,
    };
    let (mut mf, mut pf) = (0.0, 0.0);
    for (t, &xt) in x.iter().enumerate() {
        let (mp, pp) = if t == 0 {
            (0.0, p.var_0)
        } else {
            (p.a * mf, p.a * p.a * pf + p.var_z)
        };
        let s = p.c * p.c * pp + p.var_x;
        out.log_marginal += log_normal_pdf(xt, p.c * mp, s);
        let k = pp * p.c / s;
        mf = mp + k * (xt - p.c * mp);
        pf = pp * p.var_x / s;
        out.predicted_mean.push(mp);
        out.predicted_var.push(pp);
        out.filtered_mean.push(mf);
        out.filtered_var.push(pf);
    }
    Ok(out)
}

/// Exact `log p(x_{1:T})` by the prediction-error decomposition.
pub fn kalman_log_marginal(p: &LgssmParams, x: &[f64]) -> Result<OracleResult> {
    Ok(OracleResult::exact(
        kalman_filter(p, x)?.log_marginal,
        OracleMethod::Kalman,
    ))
}

/// Rauch-Tung-Striebel smoothed moments.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanSmoother {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// `cross_cov[t] = Cov(z_t, z_{t+1} | x_{1:T})`, length `T - 1`.
    pub cross_cov: Vec<f64>,
}

pub fn rts_smoother(p: &LgssmParams, x: &[f64]) -> Result<KalmanSmoother> {
    let kf = kalman_filter(p, x)?;
    let n = x.len();
    let mut mean = kf.filtered_mean.clone();
    let mut var = kf.filtered_var.clone();
    let mut cross_cov = vec![0.0; n - 1];
    for t in (0..n - 1).rev() {
        let g = kf.filtered_var[t] * p.a / kf.predicted_var[t + 1];
        mean[t] = kf.filtered_mean[t] + g * (mean[t + 1] - kf.predicted_mean[t + 1]);
        var[t] = kf.filtered_var[t] + g * g * (var[t + 1] - kf.predicted_var[t + 1]);
        cross_cov[t] = g * var[t + 1];
    }
    Ok(KalmanSmoother { mean, var, cross_cov })
}

impl KalmanSmoother {
    /// `p(z_t | z_{t-1}, x_{1:T})` from the smoothed pairwise marginal.
    pub fn conditional(&self, t: usize, z_prev: Option<f64>) -> Gaussian {
        match z_prev {
            None => Gaussian {
                mean: self.mean[t],
                var: self.var[t],
            },
            Some(zp) => {
                let c = self.cross_cov[t - 1];
                let vp = self.var[t - 1];
                Gaussian {
                    mean: self.mean[t] + c / vp * (zp - self.mean[t - 1]),
                    var: self.var[t] - c * c / vp,
                }
            }
        }
    }
}

/// One draw from `p(z_{1:T} | x_{1:T})` by forward filtering, backward sampling.
pub fn ffbs_sample(p: &LgssmParams, x: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
    let kf = kalman_filter(p, x)?;
    let n = x.len();
    let mut z = vec![0.0; n];
    z[n - 1] = kf.filtered_mean[n - 1] + kf.filtered_var[n - 1].sqrt() * rng.standard_normal();
    for t in (0..n - 1).rev() {
        let g = kf.filtered_var[t] * p.a / kf.predicted_var[t + 1];
        let m = kf.filtered_mean[t] + g * (z[t + 1] - kf.predicted_mean[t + 1]);
        let v = kf.filtered_var[t] - g * g * kf.predicted_var[t + 1];
        z[t] = m + v.max(0.0).sqrt() * rng.standard_normal();
    }
    Ok(z)
}

/// Exact `Σ_t log N(x_t; μ_t, σ² + r²)`.
pub fn conjugate_log_marginal(m: &ConjugateIndependenceModel, x: &[f64]) -> Result<OracleResult> {
    m.validate()?;
    check_observations(x)?;
    let s = m.prior_var + m.emission_var;
    let lp = (0..x.len()).map(|t| log_normal_pdf(x[t], m.prior_mean(t, x), s)).sum();
    Ok(OracleResult::exact(lp, OracleMethod::Conjugate))
}

/// Integration grid for [`quadrature_log_marginal`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridSpec {
    /// The same `[lo, hi]` with `points` nodes at every step.
    Uniform { lo: f64, hi: f64, points: usize },
    /// One `(lo, hi)` per step.
    PerStep { ranges: Vec<(f64, f64)>, points: usize },
    /// Per-step spans of `± half_width` posterior standard deviations,
    /// located with a coarse preliminary pass.
    Auto { points: usize, half_width: f64 },
}

impl GridSpec {
    pub fn auto(points: usize) -> Self {
        GridSpec::Auto {
            points,
            half_width: 8.0,
        }
    }

    fn ranges<M: SequentialModel>(&self, model: &M, x: &[f64]) -> Result<(Vec<(f64, f64)>, usize)> {
        let n = x.len();
        match self {
            GridSpec::Uniform { lo, hi, points } => Ok((vec![(*lo, *hi); n], *points)),
            GridSpec::PerStep { ranges, points } => {
                if ranges.len() != n {
                    return usage(format!("grid has {} ranges for {n} steps", ranges.len()));
                }
                Ok((ranges.clone(), *points))
            }
            GridSpec::Auto { points, half_width } => {
                let coarse = coarse_span(model, x);
                let grids: Vec<Vec<f64>> = vec![linspace(-coarse, coarse, 1201); n];
                let moments = grid_posterior_moments(model, x, &grids);
                let ranges = moments
                    .iter()
                    .map(|&(m, s)| (m - half_width * s, m + half_width * s))
                    .collect();
                Ok((ranges, *points))
            }
        }
    }
}

/// A symmetric range wide enough to contain the posterior mass of every step.
fn coarse_span<M: SequentialModel>(model: &M, x: &[f64]) -> f64 {
    let mut span: f64 = 0.0;
    for t in 0..x.len() {
        let tr = model.transition(t, x, (t > 0).then_some(0.0));
        let e = model.emission(t);
        let from_obs = if e.c.abs() > 0.05 {
            (x[t].abs() + 10.0 * e.var().sqrt()) / e.c.abs()
        } else {
            0.0
        };
        span = span.max(tr.mean.abs() + 12.0 * tr.std()).max(from_obs);
    }
    2.0 * span
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + h * i as f64).collect()
}

/// Log trapezoid weights of a uniform grid.
fn log_trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let lh = ((grid[n - 1] - grid[0]) / (n - 1) as f64).ln();
    (0..n)
        .map(|i| {
            if i == 0 || i == n - 1 {
                lh - std::f64::consts::LN_2
            } else {
                lh
            }
        })
        .collect()
}

/// Forward messages `log α_t(z)` (with trapezoid weights folded in) and the
/// resulting `log p(x)`.
fn grid_forward<M: SequentialModel>(model: &M, x: &[f64], grids: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let mut msgs: Vec<Vec<f64>> = Vec::with_capacity(x.len());
    for t in 0..x.len() {
        let lw = log_trapezoid_weights(&grids[t]);
        let msg: Vec<f64> = grids[t]
            .iter()
            .zip(&lw)
            .map(|(&z, &w)| {
                let inner = if t == 0 {
                    model.log_joint_step(0, x, None, z)
                } else {
                    let prev = &msgs[t - 1];
                    let terms: Vec<f64> = grids[t - 1]
                        .iter()
                        .zip(prev)
                        .map(|(&zp, &a)| a + model.log_joint_step(t, x, Some(zp), z))
                        .collect();
                    lse_unchecked(&terms)
                };
                inner + w
            })
            .collect();
        msgs.push(msg);
    }
    let total = lse_unchecked(msgs.last().expect("non-empty"));
    (msgs, total)
}

/// Posterior mean and standard deviation of each `z_t` on the given grids.
fn grid_posterior_moments<M: SequentialModel>(model: &M, x: &[f64], grids: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = x.len();
    let (fwd, _) = grid_forward(model, x, grids);
    let mut bwd = vec![vec![0.0; grids[n - 1].len()]; n];
    for t in (0..n - 1).rev() {
        let lw = log_trapezoid_weights(&grids[t + 1]);
        bwd[t] = grids[t]
            .iter()
            .map(|&z| {
                let terms: Vec<f64> = grids[t + 1]
                    .iter()
                    .enumerate()
                    .map(|(k, &zn)| lw[k] + model.log_joint_step(t + 1, x, Some(z), zn) + bwd[t + 1][k])
                    .collect();
                lse_unchecked(&terms)
            })
            .collect();
    }
    (0..n)
        .map(|t| {
            let lp: Vec<f64> = fwd[t].iter().zip(&bwd[t]).map(|(a, b)| a + b).collect();
            let norm = lse_unchecked(&lp);
            let (mut m1, mut m2) = (0.0, 0.0);
            for (&z, &l) in grids[t].iter().zip(&lp) {
                let w = (l - norm).exp();
                m1 += w * z;
                m2 += w * z * z;
            }
            let sd = (m2 - m1 * m1).max(0.0).sqrt();
            let h = grids[t][1] - grids[t][0];
            (m1, sd.max(4.0 * h))
        })
        .collect()
}

/// `log ∫ p(x_{1:T}, z_{1:T}) dz` by a tensor-grid trapezoid rule evaluated as
/// a Markov forward recursion in log space. The model must be Markov in `z`.
///
/// Refuses `T > 4`.
pub fn quadrature_log_marginal<M: SequentialModel>(model: &M, x: &[f64], grid: &GridSpec) -> Result<OracleResult> {
    check_observations(x)?;
    if x.len() > MAX_QUADRATURE_T {
        return Err(Error::Unsupported(format!(
            "quadrature refuses T = {} (limit {MAX_QUADRATURE_T})",
            x.len()
        )));
    }
    let (ranges, points) = grid.ranges(model, x)?;
    if points < 5 {
        return usage("quadrature grid needs at least 5 points");
    }
    if ranges
        .iter()
        .any(|&(lo, hi)| !(hi > lo) || !lo.is_finite() || !hi.is_finite())
    {
        return usage("quadrature ranges must be finite with hi > lo");
    }
    let fine: Vec<Vec<f64>> = ranges.iter().map(|&(lo, hi)| linspace(lo, hi, points)).collect();
    let (_, log_marginal) = grid_forward(model, x, &fine);
    let half = points.div_ceil(2);
    let coarse: Vec<Vec<f64>> = ranges.iter().map(|&(lo, hi)| linspace(lo, hi, half)).collect();
    let (_, log_coarse) = grid_forward(model, x, &coarse);
    Ok(OracleResult {
        log_marginal,
        method: OracleMethod::Quadrature,
        error_bound: (log_marginal - log_coarse).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{lgssm_backward_information, smoothing_proposal, Lgssm, NonlinearToy};
    use std::f64::consts::PI;

    fn lg(a: f64, c: f64, vz: f64, vx: f64, v0: f64) -> LgssmParams {
        LgssmParams::new(a, c, vz, vx, v0).unwrap()
    }

    #[test]
    fn kalman_single_step() {
        let r = kalman_log_marginal(&lg(0.0, 1.0, 1.0, 1.0, 1.0), &[0.0]).unwrap();
        assert!((r.log_marginal + 0.5 * (4.0 * PI).ln()).abs() < 1e-15);
        assert_eq!(r.error_bound, 0.0);
    }

    #[test]
    fn kalman_rejects_bad_input() {
        assert!(kalman_log_marginal(&lg(0.0, 1.0, 1.0, 1.0, 1.0), &[]).is_err());
        let bad = LgssmParams {
            var_x: 0.0,
            ..lg(0.0, 1.0, 1.0, 1.0, 1.0)
        };
        assert!(matches!(kalman_log_marginal(&bad, &[0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn kalman_matches_quadrature_t2() {
        let p = lg(0.9, 1.0, 1.0, 1.0, 1.0);
        let x = [0.7, -0.4];
        let k = kalman_log_marginal(&p, &x).unwrap().log_marginal;
        // Prior marginal std of z_2 is sqrt(1.81); 8σ covers both steps.
        let s = 8.0 * 1.81f64.sqrt();
        let grid = GridSpec::Uniform {
            lo: -s,
            hi: s,
            points: 400,
        };
        let q = quadrature_log_marginal(&Lgssm::new(p).unwrap(), &x, &grid).unwrap();
        assert!((k - q.log_marginal).abs() < 1e-6, "{k} vs {}", q.log_marginal);
    }

    #[test]
    fn kalman_matches_auto_quadrature_t3() {
        let p = lg(0.8, 1.4, 0.6, 0.3, 1.5);
        let x = [1.7, -0.2, 0.9];
        let k = kalman_log_marginal(&p, &x).unwrap().log_marginal;
        let q = quadrature_log_marginal(&Lgssm::new(p).unwrap(), &x, &GridSpec::auto(301)).unwrap();
        assert!((k - q.log_marginal).abs() < 1e-8, "{k} vs {}", q.log_marginal);
    }

    #[test]
    fn kalman_reflection_invariance() {
        // Flipping the sign of every observation together with the emission
        // coefficient describes the same model.
        let p = lg(0.7, 1.2, 0.5, 0.8, 1.0);
        let q = LgssmParams { c: -p.c, ..p };
        let x = [0.3, -1.1, 2.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let a = kalman_log_marginal(&p, &x).unwrap().log_marginal;
        let b = kalman_log_marginal(&q, &x).unwrap().log_marginal;
        let c = kalman_log_marginal(&p, &neg).unwrap().log_marginal;
        assert!((a - b).abs() < 1e-12 && (a - c).abs() < 1e-12);
    }

    #[test]
    fn conjugate_closed_form() {
        let m = ConjugateIndependenceModel::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let r = conjugate_log_marginal(&m, &[0.0, 0.0]).unwrap();
        assert!((r.log_marginal - 2.0 * log_normal_pdf(0.0, 0.0, 2.0)).abs() < 1e-15);
    }

    #[test]
    fn conjugate_single_step_is_kalman_with_zero_transition() {
        let m = ConjugateIndependenceModel::new(0.0, 0.4, 1.3, 0.7).unwrap();
        let p = lg(0.0, 1.0, 1.0, 0.7, 1.3);
        let a = conjugate_log_marginal(&m, &[0.9]).unwrap().log_marginal;
        let b = kalman_log_marginal(&p, &[0.9]).unwrap().log_marginal;
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn conjugate_matches_quadrature() {
        let m = ConjugateIndependenceModel::new(0.3, -0.6, 0.8, 0.5).unwrap();
        let x = [0.4, 1.2, -0.7];
        let a = conjugate_log_marginal(&m, &x).unwrap().log_marginal;
        let q = quadrature_log_marginal(&m, &x, &GridSpec::auto(301)).unwrap();
        assert!((a - q.log_marginal).abs() < 1e-8, "{a} vs {}", q.log_marginal);
    }

    #[test]
    fn quadrature_refuses_long_sequences() {
        let m = Lgssm::new(lg(0.5, 1.0, 1.0, 1.0, 1.0)).unwrap();
        let r = quadrature_log_marginal(&m, &[0.0; 5], &GridSpec::auto(101));
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn quadrature_converges_on_nonlinear_model() {
        let m = NonlinearToy::new(lg(1.3, 0.8, 0.5, 0.4, 1.0)).unwrap();
        let x = [0.6];
        let grid = |n| GridSpec::Uniform {
            lo: -10.0,
            hi: 10.0,
            points: n,
        };
        let a = quadrature_log_marginal(&m, &x, &grid(801)).unwrap().log_marginal;
        let b = quadrature_log_marginal(&m, &x, &grid(1601)).unwrap().log_marginal;
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn quadrature_half_line_on_symmetric_model() {
        let m = NonlinearToy::new(lg(1.3, 0.8, 0.5, 0.4, 1.0)).unwrap();
        let full = GridSpec::Uniform {
            lo: -10.0,
            hi: 10.0,
            points: 2001,
        };
        let half = GridSpec::Uniform {
            lo: 0.0,
            hi: 10.0,
            points: 1001,
        };
        let a = quadrature_log_marginal(&m, &[0.0], &full).unwrap().log_marginal;
        let b = quadrature_log_marginal(&m, &[0.0], &half).unwrap().log_marginal;
        assert!((b - (a - 2f64.ln())).abs() < 1e-10);
    }

    #[test]
    fn quadrature_error_bound_shrinks_under_refinement() {
        let m = NonlinearToy::new(lg(1.3, 0.8, 0.5, 0.4, 1.0)).unwrap();
        let x = [0.6, -0.3];
        let coarse = GridSpec::Uniform {
            lo: -6.0,
            hi: 6.0,
            points: 41,
        };
        let fine = GridSpec::Uniform {
            lo: -6.0,
            hi: 6.0,
            points: 81,
        };
        let a = quadrature_log_marginal(&m, &x, &coarse).unwrap().error_bound;
        let b = quadrature_log_marginal(&m, &x, &fine).unwrap().error_bound;
        assert!(b < a, "{b} !< {a}");
    }

    #[test]
    fn quadrature_is_deterministic() {
        let m = NonlinearToy::new(lg(1.3, 0.8, 0.5, 0.4, 1.0)).unwrap();
        let a = quadrature_log_marginal(&m, &[0.2, 0.1], &GridSpec::auto(201)).unwrap();
        let b = quadrature_log_marginal(&m, &[0.2, 0.1], &GridSpec::auto(201)).unwrap();
        assert_eq!(a.log_marginal.to_bits(), b.log_marginal.to_bits());
    }

    #[test]
    fn conditionals_integrate_to_one() {
        let m = NonlinearToy::new(lg(1.3, 0.8, 0.5, 0.4, 1.0)).unwrap();
        let x = [0.6, -0.2];
        let grid = linspace(-12.0, 12.0, 4001);
        let lw = log_trapezoid_weights(&grid);
        for zp in [-2.0, 0.0, 1.5] {
            let lz: Vec<f64> = grid
                .iter()
                .zip(&lw)
                .map(|(&z, w)| m.transition(1, &x, Some(zp)).log_pdf(z) + w)
                .collect();
            assert!(lse_unchecked(&lz).abs() < 1e-10);
            let lx: Vec<f64> = grid
                .iter()
                .zip(&lw)
                .map(|(&v, w)| m.emission(1).log_pdf(v, zp) + w)
                .collect();
            assert!(lse_unchecked(&lx).abs() < 1e-10);
        }
    }

    #[test]
    fn smoother_conditional_matches_smoothing_proposal() {
        let p = lg(0.85, 1.1, 0.6, 0.9, 1.2);
        let x = [0.4, -0.8, 1.9, 0.2];
        let sm = rts_smoother(&p, &x).unwrap();
        for t in 0..x.len() {
            let zp = (t > 0).then_some(0.3 * t as f64 - 0.5);
            let a = sm.conditional(t, zp);
            let b = smoothing_proposal(&p, zp, &x[t..]).unwrap();
            assert!((a.mean - b.mean).abs() < 1e-10 && (a.var - b.var).abs() < 1e-10);
        }
    }

    #[test]
    fn smoothing_proposal_matches_two_dimensional_quadrature() {
        // p(z_1 | x_1, x_2) by integrating z_2 out on a grid.
        let p = lg(0.9, 1.2, 0.7, 0.5, 1.1);
        let x = [0.8, -0.6];
        let grid = linspace(-9.0, 9.0, 1801);
        let lw = log_trapezoid_weights(&grid);
        let log_post: Vec<f64> = grid
            .iter()
            .map(|&z1| {
                let inner: Vec<f64> = grid
                    .iter()
                    .zip(&lw)
                    .map(|(&z2, w)| w + log_normal_pdf(z2, p.a * z1, p.var_z) + log_normal_pdf(x[1], p.c * z2, p.var_x))
                    .collect();
                log_normal_pdf(z1, 0.0, p.var_0) + log_normal_pdf(x[0], p.c * z1, p.var_x) + lse_unchecked(&inner)
            })
            .collect();
        let with_w: Vec<f64> = log_post.iter().zip(&lw).map(|(a, b)| a + b).collect();
        let norm = lse_unchecked(&with_w);
        let s = smoothing_proposal(&p, None, &x).unwrap();
        for (i, &z) in grid.iter().enumerate().step_by(150) {
            let dens = log_post[i] - norm;
            assert!((dens.exp() - s.log_pdf(z).exp()).abs() < 1e-8, "z={z}");
        }
    }

    #[test]
    fn backward_information_is_zero_without_future() {
        assert_eq!(
            lgssm_backward_information(&lg(0.9, 1.0, 1.0, 1.0, 1.0), &[]),
            (0.0, 0.0)
        );
    }

    #[test]
    fn ffbs_moments_match_smoother() {
        let p = lg(0.8, 1.0, 0.5, 0.7, 1.0);
        let x = [0.3, 1.2, -0.4];
        let sm = rts_smoother(&p, &x).unwrap();
        let mut rng = RngStream::new(11, 0);
        let n = 40_000;
        let mut s1 = [0.0; 3];
        let mut s2 = [0.0; 3];
        for _ in 0..n {
            let z = ffbs_sample(&p, &x, &mut rng).unwrap();
            for t in 0..3 {
                s1[t] += z[t];
                s2[t] += z[t] * z[t];
            }
        }
        for t in 0..3 {
            let m = s1[t] / n as f64;
            let v = s2[t] / n as f64 - m * m;
            let se = (sm.var[t] / n as f64).sqrt();
            assert!((m - sm.mean[t]).abs() < 4.0 * se, "t={t}");
            assert!((v - sm.var[t]).abs() < 4.0 * sm.var[t] * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn conjugate_independence_hypothesis_holds_on_grid() {
        // p(z_1, z_2 | x_{1:3}) = p(z_1, z_2 | x_{1:2}) for the conjugate model.
        let m = ConjugateIndependenceModel::new(0.2, 0.7, 0.8, 0.6).unwrap();
        let x = [0.5, -1.0, 1.4];
        let grid = linspace(-8.0, 8.0, 161);
        let lw = log_trapezoid_weights(&grid);
        let mut with3 = Vec::new();
        let mut with2 = Vec::new();
        for &z1 in &grid {
            for &z2 in &grid {
                let base = m.log_joint_step(0, &x, None, z1) + m.log_joint_step(1, &x, Some(z1), z2);
                let inner: Vec<f64> = grid
                    .iter()
                    .zip(&lw)
                    .map(|(&z3, w)| w + m.log_joint_step(2, &x, Some(z2), z3))
                    .collect();
                with3.push(base + lse_unchecked(&inner));
                with2.push(base);
            }
        }
        let n3 = lse_unchecked(&with3);
        let n2 = lse_unchecked(&with2);
        for (a, b) in with3.iter().zip(&with2) {
            assert!(((a - n3).exp() - (b - n2).exp()).abs() < 1e-10);
        }
    }
}
