use serde::{Deserialize, Serialize};

use super::{GaussianGrad, LgssmParams, SequentialModel};
use crate::error::{usage, Result};
use crate::numerics::Gaussian;

/// A factored proposal `q(z_{1:T} | x_{1:T}) = Π_t q_t(z_t | x_{1:t}, z_{t-1})`
/// whose per-step conditionals are Gaussian.
///
/// Sampling is reparameterized as `z_t = mean + std·ε`.
pub trait Proposal<M: SequentialModel>: Clone + Send + Sync {
    fn params(&self) -> Vec<f64>;

    fn with_params(&self, params: &[f64]) -> Result<Self>;

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn conditional(&self, model: &M, t: usize, x: &[f64], z_prev: Option<f64>) -> Gaussian;

    /// Derivatives laid out as `[θ, φ, z_prev]`.
    fn conditional_grad(&self, model: &M, t: usize, x: &[f64], z_prev: Option<f64>) -> GaussianGrad;

    /// Whether pathwise gradients through the samples are valid.
    fn is_reparameterized(&self) -> bool {
        true
    }
}

/// Fold a Gaussian information term `exp(-J z²/2 + h z)` into `base`.
///
/// `d_j` and `d_h` use the same derivative layout as `base`.
fn absorb(base: GaussianGrad, j: f64, h: f64, d_j: &[f64], d_h: &[f64]) -> GaussianGrad {
    let ip = (-2.0 * base.log_std).exp();
    let prec = ip + j;
    let mean = (base.mean * ip + h) / prec;
    let len = base.d_mean.len();
    let mut d_mean = vec![0.0; len];
    let mut d_log_std = vec![0.0; len];
    for k in 0..len {
        let d_ip = -2.0 * ip * base.d_log_std[k];
        let d_prec = d_ip + d_j[k];
        let d_n = base.d_mean[k] * ip + base.mean * d_ip + d_h[k];
        d_mean[k] = (d_n - mean * d_prec) / prec;
        d_log_std[k] = -0.5 * d_prec / prec;
    }
    GaussianGrad {
        mean,
        log_std: -0.5 * prec.ln(),
        d_mean,
        d_log_std,
        ..base
    }
}

fn absorb_value(base: Gaussian, j: f64, h: f64) -> Gaussian {
    let prec = 1.0 / base.var + j;
    Gaussian {
        mean: (base.mean / base.var + h) / prec,
        var: 1.0 / prec,
    }
}

/// Information `(J, h)` contributed by observation `x_t` through the emission.
fn emission_information<M: SequentialModel>(model: &M, t: usize, x: &[f64]) -> (f64, f64) {
    let e = model.emission(t);
    let iv = 1.0 / e.var();
    (e.c * e.c * iv, e.c * x[t] * iv)
}

/// The prior `p(z_t | x_{1:t-1}, z_{t-1})`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BootstrapProposal;

impl<M: SequentialModel> Proposal<M> for BootstrapProposal {
    fn params(&self) -> Vec<f64> {
        Vec::new()
    }

    fn with_params(&self, params: &[f64]) -> Result<Self> {
        if !params.is_empty() {
            return usage("bootstrap proposal has no parameters");
        }
        Ok(*self)
    }

    fn conditional(&self, model: &M, t: usize, x: &[f64], z_prev: Option<f64>) -> Gaussian {
        model.transition(t, x, z_prev)
    }

    fn conditional_grad(&self, model: &M, t: usize, x: &[f64], z_prev: Option<f64>) -> GaussianGrad {
        model.transition_grad(t, x, z_prev)
    }
}

/// Residual Gaussian proposal: the prior's mean and log-std plus affine
/// functions of `(z_{t-1}, x_t)`. All-zero parameters reproduce the prior.
///
/// Parameter vector: `[mean_bias, mean_zprev, mean_x, log_std_bias,
/// log_std_zprev, log_std_x]`. At `t = 0` the `z_prev` features are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnedGaussian {
    pub mean_bias: f64,
    pub mean_zprev: f64,
    pub mean_x: f64,
    pub log_std_bias: f64,
    pub log_std_zprev: f64,
    pub log_std_x: f64,
}

impl<M: SequentialModel> Proposal<M> for LearnedGaussian {
    fn params(&self) -> Vec<f64> {
        vec![
            self.mean_bias,
            self.mean_zprev,
            self.mean_x,
            self.log_std_bias,
            self.log_std_zprev,
            self.log_std_x,
        ]
    }

    fn with_params(&self, p: &[f64]) -> Result<Self> {
        if p.len() != 6 {
            return usage(format!("learned proposal expects 6 parameters, got {}", p.len()));
        }
        Ok(Self {
            mean_bias: p[0],
            mean_zprev: p[1],
            mean_x: p[2],
            log_std_bias: p[3],
            log_std_zprev: p[4],
            log_std_x: p[5],
        })
    }

    fn conditional(&self, model: &M, t: usize, x: &[f64], z_prev: Option<f64>) -> Gaussian {
        let prior = model.transition(t, x, z_prev);
        let zp = z_prev.unwrap_or(0.0);
        let mean = prior.mean + self.mean_bias + self.mean_zprev * zp + self.mean_x * x[t];
        let log_std = prior.log_std() + self.log_std_bias + self.log_std_zprev * zp + self.log_std_x * x[t];
        Gaussian::from_log_std(mean, log_std)
    }

    fn conditional_grad(&self, model: &M, t: usize, x: &[f64], z_prev: Option<f64>) -> GaussianGrad {
        let mut g = model.transition_grad(t, x, z_prev).widen(6);
        let zp = z_prev.unwrap_or(0.0);
        g.mean += self.mean_bias + self.mean_zprev * zp + self.mean_x * x[t];
        g.log_std += self.log_std_bias + self.log_std_zprev * zp + self.log_std_x * x[t];
        let o = g.n_theta;
        g.d_mean[o] = 1.0;
        g.d_mean[o + 1] = zp;
        g.d_mean[o + 2] = x[t];
        g.d_log_std[o + 3] = 1.0;
        g.d_log_std[o + 4] = zp;
        g.d_log_std[o + 5] = x[t];
        if z_prev.is_some() {
            let iz = g.zprev_index();
            g.d_mean[iz] += self.mean_zprev;
            g.d_log_std[iz] += self.log_std_zprev;
        }
        g
    }
}

/// `p(z_t | x_{1:t}, z_{t-1})`: the prior combined with the current
/// observation by Gaussian conjugacy. With it the incremental weight does not
/// depend on `z_t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimalFilterProposal;

impl<M: SequentialModel> Proposal<M> for OptimalFilterProposal {
    fn params(&self) -> Vec<f64> {
        Vec::new()
    }

    fn with_params(&self, params: &[f64]) -> Result<Self> {
        if !params.is_empty() {
            return usage("filter proposal has no parameters");
        }
        Ok(*self)
    }

    fn conditional(&self, model: &M, t: usize, x: &[f64], z_prev: Option<f64>) -> Gaussian {
        let (j, h) = emission_information(model, t, x);
        absorb_value(model.transition(t, x, z_prev), j, h)
    }

    fn conditional_grad(&self, model: &M, t: usize, x: &[f64], z_prev: Option<f64>) -> GaussianGrad {
        let base = model.transition_grad(t, x, z_prev);
        let eg = model.emission_grad(t);
        let (c, iv) = (eg.emission.c, 1.0 / eg.emission.var());
        let (j, h) = (c * c * iv, c * x[t] * iv);
        let len = base.d_mean.len();
        let mut d_j = vec![0.0; len];
        let mut d_h = vec![0.0; len];
        for k in 0..base.n_theta {
            let (dc, dl) = (eg.d_c[k], eg.d_log_std[k]);
            d_j[k] = 2.0 * c * iv * dc - 2.0 * j * dl;
            d_h[k] = x[t] * iv * dc - 2.0 * h * dl;
        }
        absorb(base, j, h, &d_j, &d_h)
    }
}

/// Exact `p(z_t | z_{t-1}, x_t)` for an LGSSM.
pub fn optimal_filter_proposal(p: &LgssmParams, z_prev: Option<f64>, x_t: f64) -> Gaussian {
    let prior = match z_prev {
        None => Gaussian {
            mean: 0.0,
            var: p.var_0,
        },
        Some(zp) => Gaussian {
            mean: p.a * zp,
            var: p.var_z,
        },
    };
    absorb_value(prior, p.c * p.c / p.var_x, p.c * x_t / p.var_x)
}

/// Backward information `(J, h)` about `z_t` carried by the observations
/// after it (`x_after = x_{t+1:T}`), so that
/// `p(x_{t+1:T} | z_t) ∝ exp(-J z_t²/2 + h z_t)`.
pub fn lgssm_backward_information(p: &LgssmParams, x_after: &[f64]) -> (f64, f64) {
    let (mut j, mut h) = (0.0, 0.0);
    for &xk in x_after.iter().rev() {
        let jj = j + p.c * p.c / p.var_x;
        let hh = h + p.c * xk / p.var_x;
        let prec = 1.0 / p.var_z + jj;
        j = p.a * p.a / p.var_z - p.a * p.a / (p.var_z * p.var_z * prec);
        h = p.a * hh / (p.var_z * prec);
    }
    (j, h)
}

/// Exact `p(z_t | z_{t-1}, x_{t:T})` for an LGSSM; `x_future = x_{t:T}`.
pub fn smoothing_proposal(p: &LgssmParams, z_prev: Option<f64>, x_future: &[f64]) -> Result<Gaussian> {
    p.validate()?;
    let Some((&x_t, after)) = x_future.split_first() else {
        return usage("smoothing proposal needs at least the current observation");
    };
    let (j, h) = lgssm_backward_information(p, after);
    Ok(absorb_value(optimal_filter_proposal(p, z_prev, x_t), j, h))
}

/// Where a smoothing proposal gets its summary of future observations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackwardSource {
    /// No future information; the wrapper is its base proposal.
    Zero,
    /// Backward information filter of a fixed LGSSM. The parameters are
    /// held constant, so no gradient flows through these statistics.
    Lgssm(LgssmParams),
}

/// A base proposal augmented with backward statistics of `x_{t+1:T}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingProposal<P> {
    pub base: P,
    pub backward: BackwardSource,
}

impl<P> SmoothingProposal<P> {
    fn statistics(&self, t: usize, x: &[f64]) -> (f64, f64) {
        match &self.backward {
            BackwardSource::Zero => (0.0, 0.0),
            BackwardSource::Lgssm(p) => lgssm_backward_information(p, &x[t + 1..]),
        }
    }
}

impl<M: SequentialModel, P: Proposal<M>> Proposal<M> for SmoothingProposal<P> {
    fn params(&self) -> Vec<f64> {
        self.base.params()
    }

    fn with_params(&self, params: &[f64]) -> Result<Self> {
        Ok(Self {
            base: self.base.with_params(params)?,
            backward: self.backward,
        })
    }

    fn conditional(&self, model: &M, t: usize, x: &[f64], z_prev: Option<f64>) -> Gaussian {
        let base = self.base.conditional(model, t, x, z_prev);
        match self.statistics(t, x) {
            (0.0, 0.0) => base,
            (j, h) => absorb_value(base, j, h),
        }
    }

    fn conditional_grad(&self, model: &M, t: usize, x: &[f64], z_prev: Option<f64>) -> GaussianGrad {
        let base = self.base.conditional_grad(model, t, x, z_prev);
        match self.statistics(t, x) {
            (0.0, 0.0) => base,
            (j, h) => {
                let zeros = vec![0.0; base.d_mean.len()];
                absorb(base, j, h, &zeros, &zeros)
            }
        }
    }

    fn is_reparameterized(&self) -> bool {
        self.base.is_reparameterized()
    }
}

/// Marks a proposal as usable only through score-function gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct NonReparameterized<P>(pub P);

impl<M: SequentialModel, P: Proposal<M>> Proposal<M> for NonReparameterized<P> {
    fn params(&self) -> Vec<f64> {
        self.0.params()
    }

    fn with_params(&self, params: &[f64]) -> Result<Self> {
        Ok(Self(self.0.with_params(params)?))
    }

    fn conditional(&self, model: &M, t: usize, x: &[f64], z_prev: Option<f64>) -> Gaussian {
        self.0.conditional(model, t, x, z_prev)
    }

    fn conditional_grad(&self, model: &M, t: usize, x: &[f64], z_prev: Option<f64>) -> GaussianGrad {
        self.0.conditional_grad(model, t, x, z_prev)
    }

    fn is_reparameterized(&self) -> bool {
        false
    }
}

/// Any of the proposal families; the JSON form is tagged by `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnyProposal {
    Bootstrap,
    Learned(LearnedGaussian),
    Filter,
    Smoothing(Box<SmoothingProposal<AnyProposal>>),
}

impl AnyProposal {
    pub fn learned() -> Self {
        AnyProposal::Learned(LearnedGaussian::default())
    }
}

impl<M: SequentialModel> Proposal<M> for AnyProposal {
    fn params(&self) -> Vec<f64> {
        match self {
            AnyProposal::Bootstrap | AnyProposal::Filter => Vec::new(),
            AnyProposal::Learned(p) => Proposal::<M>::params(p),
            AnyProposal::Smoothing(p) => Proposal::<M>::params(&p.base),
        }
    }

    fn with_params(&self, params: &[f64]) -> Result<Self> {
        Ok(match self {
            AnyProposal::Bootstrap | AnyProposal::Filter => {
                if !params.is_empty() {
                    return usage("proposal has no parameters");
                }
                self.clone()
            }
            AnyProposal::Learned(p) => AnyProposal::Learned(Proposal::<M>::with_params(p, params)?),
            AnyProposal::Smoothing(p) => {
                AnyProposal::Smoothing(Box::new(Proposal::<M>::with_params(p.as_ref(), params)?))
            }
        })
    }

    fn conditional(&self, model: &M, t: usize, x: &[f64], z_prev: Option<f64>) -> Gaussian {
        match self {
            AnyProposal::Bootstrap => BootstrapProposal.conditional(model, t, x, z_prev),
            AnyProposal::Learned(p) => p.conditional(model, t, x, z_prev),
            AnyProposal::Filter => OptimalFilterProposal.conditional(model, t, x, z_prev),
            AnyProposal::Smoothing(p) => p.conditional(model, t, x, z_prev),
        }
    }

    fn conditional_grad(&self, model: &M, t: usize, x: &[f64], z_prev: Option<f64>) -> GaussianGrad {
        match self {
            AnyProposal::Bootstrap => BootstrapProposal.conditional_grad(model, t, x, z_prev),
            AnyProposal::Learned(p) => p.conditional_grad(model, t, x, z_prev),
            AnyProposal::Filter => OptimalFilterProposal.conditional_grad(model, t, x, z_prev),
            AnyProposal::Smoothing(p) => p.conditional_grad(model, t, x, z_prev),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{AnyModel, ConjugateIndependenceModel, Lgssm, NonlinearToy};
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn params(a: f64) -> LgssmParams {
        LgssmParams::new(a, 1.0, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn filter_proposal_closed_form() {
        let g = optimal_filter_proposal(&params(0.0), Some(0.3), 2.0);
        assert!((g.mean - 1.0).abs() < 1e-15);
        assert!((g.var - 0.5).abs() < 1e-15);
    }

    #[test]
    fn filter_proposal_uninformative_observation_is_prior() {
        let p = LgssmParams::new(0.7, 1.0, 2.0, 1e300, 1.0).unwrap();
        let g = optimal_filter_proposal(&p, Some(1.5), 3.0);
        assert!((g.mean - 1.05).abs() < 1e-12);
        assert!((g.var - 2.0).abs() < 1e-12);
    }

    #[test]
    fn filter_proposal_matches_quadrature() {
        let p = LgssmParams::new(0.8, 1.3, 0.7, 0.4, 1.0).unwrap();
        let (zp, xt) = (0.6, -0.9);
        let lp = |z: f64| {
            crate::numerics::log_normal_pdf(z, p.a * zp, p.var_z)
                + crate::numerics::log_normal_pdf(xt, p.c * z, p.var_x)
        };
        let (lo, hi, n) = (-10.0, 10.0, 200_001);
        let h = (hi - lo) / (n - 1) as f64;
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let z = lo + h * i as f64;
            let w = lp(z).exp() * if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            m0 += w;
            m1 += w * z;
            m2 += w * z * z;
        }
        let mean = m1 / m0;
        let var = m2 / m0 - mean * mean;
        let g = optimal_filter_proposal(&p, Some(zp), xt);
        assert!((g.mean - mean).abs() < 1e-9);
        assert!((g.var - var).abs() < 1e-9);
    }

    #[test]
    fn smoothing_without_future_is_filter() {
        let p = LgssmParams::new(0.8, 1.3, 0.7, 0.4, 1.0).unwrap();
        let s = smoothing_proposal(&p, Some(0.2), &[1.1]).unwrap();
        assert_eq!(s, optimal_filter_proposal(&p, Some(0.2), 1.1));
        assert!(smoothing_proposal(&p, Some(0.2), &[]).is_err());
    }

    #[test]
    fn smoothing_with_zero_transition_ignores_future() {
        let p = LgssmParams::new(0.0, 1.3, 0.7, 0.4, 1.0).unwrap();
        let s = smoothing_proposal(&p, Some(0.2), &[1.1, -3.0, 2.0]).unwrap();
        let f = optimal_filter_proposal(&p, Some(0.2), 1.1);
        assert!((s.mean - f.mean).abs() < 1e-15 && (s.var - f.var).abs() < 1e-15);
    }

    #[test]
    fn zero_backward_statistics_are_bit_identical() {
        let m = Lgssm::new(params(0.9)).unwrap();
        let x = [0.4, -1.0, 2.0];
        let base = LearnedGaussian {
            mean_bias: 0.3,
            log_std_x: -0.2,
            ..Default::default()
        };
        let s = SmoothingProposal {
            base,
            backward: BackwardSource::Zero,
        };
        for t in 0..3 {
            let zp = (t > 0).then_some(0.7);
            assert_eq!(s.conditional(&m, t, &x, zp), base.conditional(&m, t, &x, zp));
            assert_eq!(s.conditional_grad(&m, t, &x, zp), base.conditional_grad(&m, t, &x, zp));
        }
    }

    #[test]
    fn learned_with_zero_parameters_is_prior() {
        let m = NonlinearToy::new(params(1.1)).unwrap();
        let x = [0.4, -1.0];
        let q = LearnedGaussian::default();
        assert_eq!(q.conditional(&m, 1, &x, Some(0.3)), m.transition(1, &x, Some(0.3)));
    }

    #[test]
    fn proposal_json_round_trip() {
        let p = AnyModel::Lgssm(Lgssm::new(params(0.9)).unwrap())
            .exact_posterior_proposal()
            .unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let back: AnyProposal = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        let l: AnyProposal = serde_json::from_str(r#"{"kind":"learned","mean_x":0.5}"#).unwrap();
        assert_eq!(
            l,
            AnyProposal::Learned(LearnedGaussian {
                mean_x: 0.5,
                ..Default::default()
            })
        );
    }

    fn fd_check<M: SequentialModel, P: Proposal<M>>(m: &M, q: &P, t: usize, x: &[f64], zp: f64) {
        let zp_opt = (t > 0).then_some(zp);
        let g = q.conditional_grad(m, t, x, zp_opt);
        let c = q.conditional(m, t, x, zp_opt);
        assert!((g.mean - c.mean).abs() < 1e-12 && (g.log_std - c.log_std()).abs() < 1e-12);
        let h = 1e-5;
        let theta = m.params();
        let phi = q.params();
        let eval = |th: &[f64], ph: &[f64], z: f64| {
            let mm = m.with_params(th).unwrap();
            let qq = q.with_params(ph).unwrap();
            let c = qq.conditional(&mm, t, x, (t > 0).then_some(z));
            (c.mean, c.log_std())
        };
        let nt = theta.len();
        for k in 0..nt + phi.len() + 1 {
            let (mut tp, mut tm) = (theta.clone(), theta.clone());
            let (mut pp, mut pm) = (phi.clone(), phi.clone());
            let (mut zpp, mut zpm) = (zp, zp);
            if k < nt {
                tp[k] += h;
                tm[k] -= h;
            } else if k < nt + phi.len() {
                pp[k - nt] += h;
                pm[k - nt] -= h;
            } else {
                zpp += h;
                zpm -= h;
            }
            let (a, b) = (eval(&tp, &pp, zpp), eval(&tm, &pm, zpm));
            let fd_m = (a.0 - b.0) / (2.0 * h);
            let fd_s = (a.1 - b.1) / (2.0 * h);
            let expect_zero = k == nt + phi.len() && t == 0;
            let (gm, gs) = if expect_zero {
                (0.0, 0.0)
            } else {
                (g.d_mean[k], g.d_log_std[k])
            };
            assert!((gm - fd_m).abs() < 1e-6, "mean coord {k}: {gm} vs {fd_m}");
            assert!((gs - fd_s).abs() < 1e-6, "log_std coord {k}: {gs} vs {fd_s}");
        }
    }

    fn arb_lgssm() -> impl Strategy<Value = LgssmParams> {
        (-1.2..1.2f64, 0.3..1.5f64, -0.7..0.5f64, -0.7..0.5f64, -0.5..0.5f64).prop_map(|(a, c, lz, lx, l0)| {
            LgssmParams::new(a, c, (2.0 * lz).exp(), (2.0 * lx).exp(), (2.0 * l0).exp()).unwrap()
        })
    }

    fn arb_learned() -> impl Strategy<Value = LearnedGaussian> {
        prop::collection::vec(-0.4..0.4f64, 6).prop_map(|v| LearnedGaussian {
            mean_bias: v[0],
            mean_zprev: v[1],
            mean_x: v[2],
            log_std_bias: v[3],
            log_std_zprev: v[4],
            log_std_x: v[5],
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn proposal_gradients_match_finite_differences(
            p in arb_lgssm(),
            q in arb_learned(),
            x in prop::collection::vec(-2.0..2.0f64, 3),
            zp in -2.0..2.0f64,
            t in 0usize..3,
        ) {
            let lg = Lgssm::new(p).unwrap();
            let nl = NonlinearToy::new(p).unwrap();
            let cj = ConjugateIndependenceModel::new(p.a, p.c - 0.9, p.var_z, p.var_x).unwrap();
            fd_check(&lg, &q, t, &x, zp);
            fd_check(&nl, &q, t, &x, zp);
            fd_check(&cj, &q, t, &x, zp);
            fd_check(&lg, &OptimalFilterProposal, t, &x, zp);
            fd_check(&nl, &OptimalFilterProposal, t, &x, zp);
            fd_check(&cj, &BootstrapProposal, t, &x, zp);
            let s = SmoothingProposal { base: q, backward: BackwardSource::Lgssm(p) };
            fd_check(&nl, &s, t, &x, zp);
        }

        #[test]
        fn joint_step_gradients_match_finite_differences(
            p in arb_lgssm(),
            x in prop::collection::vec(-2.0..2.0f64, 3),
            zp in -2.0..2.0f64,
            z in -2.0..2.0f64,
            t in 0usize..3,
        ) {
            let models = [
                AnyModel::Lgssm(Lgssm::new(p).unwrap()),
                AnyModel::Nonlinear(NonlinearToy::new(p).unwrap()),
                AnyModel::Conjugate(
                    ConjugateIndependenceModel::new(p.a, p.c, p.var_z, p.var_x).unwrap(),
                ),
            ];
            let h = 1e-5;
            for m in &models {
                let zpo = (t > 0).then_some(zp);
                let g = m.log_joint_step_grad(t, &x, zpo, z);
                prop_assert!((g.value - m.log_joint_step(t, &x, zpo, z)).abs() < 1e-12);
                let th = m.params();
                for k in 0..th.len() {
                    let (mut a, mut b) = (th.clone(), th.clone());
                    a[k] += h;
                    b[k] -= h;
                    let fd = (m.with_params(&a).unwrap().log_joint_step(t, &x, zpo, z)
                        - m.with_params(&b).unwrap().log_joint_step(t, &x, zpo, z))
                        / (2.0 * h);
                    prop_assert!((fd - g.d_theta[k]).abs() < 1e-6);
                }
                let fdz = (m.log_joint_step(t, &x, zpo, z + h) - m.log_joint_step(t, &x, zpo, z - h))
                    / (2.0 * h);
                prop_assert!((fdz - g.d_z).abs() < 1e-6);
                if t > 0 {
                    let fdp = (m.log_joint_step(t, &x, Some(zp + h), z)
                        - m.log_joint_step(t, &x, Some(zp - h), z))
                        / (2.0 * h);
                    prop_assert!((fdp - g.d_zprev).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn sampled_data_has_requested_length() {
        let m = Lgssm::new(params(0.9)).unwrap();
        let (x, z) = m.sample(7, &mut RngStream::new(3, 0));
        assert_eq!((x.len(), z.len()), (7, 7));
    }
}
