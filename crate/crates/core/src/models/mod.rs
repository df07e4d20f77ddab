//! Sequential latent-variable models and their proposals.
//!
//! Every reference model has a 1-D latent chain with a Gaussian transition
//! `p(z_t | x_{1:t-1}, z_{t-1})` and a linear-Gaussian emission
//! `x_t ~ N(c z_t, σ_x²)`. The joint factors over steps, so each model only
//! exposes the two per-step conditionals plus their first derivatives.
//!
//! Steps are 0-based in code (`t = 0` is the first observation). Parameter
//! vectors use log standard deviations for scale parameters.

mod proposals;

pub use proposals::{
    lgssm_backward_information, optimal_filter_proposal, smoothing_proposal, AnyProposal, BackwardSource,
    BootstrapProposal, LearnedGaussian, NonReparameterized, OptimalFilterProposal, Proposal, SmoothingProposal,
};

use serde::{Deserialize, Serialize};

use crate::error::{domain, usage, Error, Result};
use crate::numerics::{Gaussian, RngStream};
use crate::oracles::{self, GridSpec, OracleResult};

/// A Gaussian conditional together with derivatives of its mean and log-std.
///
/// Derivative vectors share one layout: `[θ (n_theta), φ (n_phi), z_prev]`.
/// Model-side conditionals have `n_phi = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrad {
    pub mean: f64,
    pub log_std: f64,
    pub n_theta: usize,
    pub n_phi: usize,
    pub d_mean: Vec<f64>,
    pub d_log_std: Vec<f64>,
}

impl GaussianGrad {
    pub fn zeros(mean: f64, log_std: f64, n_theta: usize, n_phi: usize) -> Self {
        let len = n_theta + n_phi + 1;
        Self {
            mean,
            log_std,
            n_theta,
            n_phi,
            d_mean: vec![0.0; len],
            d_log_std: vec![0.0; len],
        }
    }

    pub fn gaussian(&self) -> Gaussian {
        Gaussian::from_log_std(self.mean, self.log_std)
    }

    pub fn std(&self) -> f64 {
        self.log_std.exp()
    }

    /// Index of the `z_prev` slot in the derivative vectors.
    pub fn zprev_index(&self) -> usize {
        self.n_theta + self.n_phi
    }

    pub fn d_mean_zprev(&self) -> f64 {
        self.d_mean[self.zprev_index()]
    }

    pub fn d_log_std_zprev(&self) -> f64 {
        self.d_log_std[self.zprev_index()]
    }

    /// Re-lay a model-side gradient (`n_phi = 0`) for a proposal with `n_phi`
    /// parameters.
    pub fn widen(mut self, n_phi: usize) -> Self {
        debug_assert_eq!(self.n_phi, 0);
        let zm = self.d_mean.pop().unwrap_or(0.0);
        let zs = self.d_log_std.pop().unwrap_or(0.0);
        self.d_mean.extend(std::iter::repeat_n(0.0, n_phi));
        self.d_log_std.extend(std::iter::repeat_n(0.0, n_phi));
        self.d_mean.push(zm);
        self.d_log_std.push(zs);
        self.n_phi = n_phi;
        self
    }
}

/// Linear-Gaussian emission `x_t ~ N(c z_t, σ_x²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearEmission {
    pub c: f64,
    pub log_std: f64,
}

impl LinearEmission {
    pub fn var(&self) -> f64 {
        (2.0 * self.log_std).exp()
    }

    pub fn log_pdf(&self, x: f64, z: f64) -> f64 {
        crate::numerics::log_normal_pdf(x, self.c * z, self.var())
    }
}

/// [`LinearEmission`] with derivatives of `c` and `log σ_x` w.r.t. θ.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearEmissionGrad {
    pub emission: LinearEmission,
    pub d_c: Vec<f64>,
    pub d_log_std: Vec<f64>,
}

/// Value and derivatives of `log p_t(x_t, z_t | x_{1:t-1}, z_{t-1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointStepGrad {
    pub value: f64,
    pub d_theta: Vec<f64>,
    pub d_z: f64,
    pub d_zprev: f64,
}

/// Partial derivatives of `log N(z; m, e^{ls})` w.r.t. `(m, ls, z)`.
#[inline]
pub(crate) fn log_normal_partials(z: f64, mean: f64, log_std: f64) -> (f64, f64, f64) {
    let inv_var = (-2.0 * log_std).exp();
    let d = z - mean;
    let g_mean = d * inv_var;
    let g_log_std = d * d * inv_var - 1.0;
    (g_mean, g_log_std, -g_mean)
}

/// A sequential model `p(x_{1:T}, z_{1:T}) = Π_t p_t(x_t, z_t | x_{1:t-1}, z_{t-1})`
/// with Gaussian transitions and linear-Gaussian emissions.
pub trait SequentialModel: Clone + Send + Sync {
    fn name(&self) -> &'static str;

    fn params(&self) -> Vec<f64>;

    /// Same model family with a new parameter vector.
    fn with_params(&self, params: &[f64]) -> Result<Self>;

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// `p(z_t | x_{1:t-1}, z_{t-1})`; `z_prev` is `None` at `t = 0`.
    fn transition(&self, t: usize, x: &[f64], z_prev: Option<f64>) -> Gaussian;

    fn transition_grad(&self, t: usize, x: &[f64], z_prev: Option<f64>) -> GaussianGrad;

    fn emission(&self, t: usize) -> LinearEmission;

    fn emission_grad(&self, t: usize) -> LinearEmissionGrad;

    /// Exact `log p(x_{1:T})` when the family admits one.
    fn exact_log_marginal(&self, x: &[f64]) -> Result<OracleResult> {
        let _ = x;
        Err(Error::Unsupported(format!(
            "no exact marginal likelihood for {}",
            self.name()
        )))
    }

    fn log_joint_step(&self, t: usize, x: &[f64], z_prev: Option<f64>, z: f64) -> f64 {
        self.transition(t, x, z_prev).log_pdf(z) + self.emission(t).log_pdf(x[t], z)
    }

    fn log_joint_step_grad(&self, t: usize, x: &[f64], z_prev: Option<f64>, z: f64) -> JointStepGrad {
        let tr = self.transition_grad(t, x, z_prev);
        let em = self.emission_grad(t);
        let (gm, gs, gz) = log_normal_partials(z, tr.mean, tr.log_std);
        let e = em.emission;
        let (em_gm, em_gs, _) = log_normal_partials(x[t], e.c * z, e.log_std);
        let n = tr.n_theta;
        let d_theta = (0..n)
            .map(|k| gm * tr.d_mean[k] + gs * tr.d_log_std[k] + em_gm * z * em.d_c[k] + em_gs * em.d_log_std[k])
            .collect();
        let value = tr.gaussian().log_pdf(z) + e.log_pdf(x[t], z);
        JointStepGrad {
            value,
            d_theta,
            d_z: gz + em_gm * e.c,
            d_zprev: gm * tr.d_mean_zprev() + gs * tr.d_log_std_zprev(),
        }
    }

    /// `log p(x_{1:T}, z_{1:T})`.
    fn log_joint(&self, x: &[f64], z: &[f64]) -> f64 {
        assert_eq!(x.len(), z.len(), "observation and latent lengths differ");
        (0..x.len())
            .map(|t| self.log_joint_step(t, x, (t > 0).then(|| z[t - 1]), z[t]))
            .sum()
    }

    /// Ancestral sample `(x_{1:T}, z_{1:T})`.
    fn sample(&self, len: usize, rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(len);
        let mut z = Vec::with_capacity(len);
        for t in 0..len {
            let zt = self.transition(t, &x, z.last().copied()).sample(rng);
            let e = self.emission(t);
            x.push(e.c * zt + e.log_std.exp() * rng.standard_normal());
            z.push(zt);
        }
        (x, z)
    }
}

fn check_var(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        domain(format!("{name} must be positive and finite, got {v}"))
    }
}

fn check_len(params: &[f64], n: usize, family: &str) -> Result<()> {
    if params.len() != n {
        return usage(format!("{family} expects {n} parameters, got {}", params.len()));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return domain(format!("{family} parameters must be finite"));
    }
    Ok(())
}

/// Scalar linear-Gaussian state-space model parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgssmParams {
    /// Transition coefficient.
    pub a: f64,
    /// Emission coefficient.
    pub c: f64,
    /// Transition noise variance.
    pub var_z: f64,
    /// Emission noise variance.
    pub var_x: f64,
    /// Variance of `z_1`.
    pub var_0: f64,
}

impl LgssmParams {
    pub fn new(a: f64, c: f64, var_z: f64, var_x: f64, var_0: f64) -> Result<Self> {
        let p = Self {
            a,
            c,
            var_z,
            var_x,
            var_0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.a.is_finite() || !self.c.is_finite() {
            return domain("LGSSM coefficients must be finite");
        }
        check_var("var_z", self.var_z)?;
        check_var("var_x", self.var_x)?;
        check_var("var_0", self.var_0)
    }
}

/// Linear-Gaussian SSM: `z_1 ~ N(0, σ_0²)`, `z_t ~ N(a z_{t-1}, σ_z²)`,
/// `x_t ~ N(c z_t, σ_x²)`.
///
/// Parameter vector: `[a, c, ln σ_z, ln σ_x, ln σ_0]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lgssm {
    #[serde(flatten)]
    pub params: LgssmParams,
}

impl Lgssm {
    pub fn new(params: LgssmParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }
}

/// Shared parameter handling for the two Markov models with layout
/// `[a, c, ln σ_z, ln σ_x, ln σ_0]`.
fn markov_params(p: &LgssmParams) -> Vec<f64> {
    vec![p.a, p.c, 0.5 * p.var_z.ln(), 0.5 * p.var_x.ln(), 0.5 * p.var_0.ln()]
}

fn markov_from_vec(v: &[f64], family: &str) -> Result<LgssmParams> {
    check_len(v, 5, family)?;
    LgssmParams::new(v[0], v[1], (2.0 * v[2]).exp(), (2.0 * v[3]).exp(), (2.0 * v[4]).exp())
}

fn markov_emission_grad(p: &LgssmParams) -> LinearEmissionGrad {
    let mut d_c = vec![0.0; 5];
    let mut d_log_std = vec![0.0; 5];
    d_c[1] = 1.0;
    d_log_std[3] = 1.0;
    LinearEmissionGrad {
        emission: LinearEmission {
            c: p.c,
            log_std: 0.5 * p.var_x.ln(),
        },
        d_c,
        d_log_std,
    }
}

/// Transition for `z_t = a·f(z_{t-1}) + noise`, given `f` and `f'`.
fn markov_transition_grad(
    p: &LgssmParams,
    z_prev: Option<f64>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64,
) -> GaussianGrad {
    match z_prev {
        None => {
            let mut g = GaussianGrad::zeros(0.0, 0.5 * p.var_0.ln(), 5, 0);
            g.d_log_std[4] = 1.0;
            g
        }
        Some(zp) => {
            let mut g = GaussianGrad::zeros(p.a * f(zp), 0.5 * p.var_z.ln(), 5, 0);
            g.d_mean[0] = f(zp);
            g.d_mean[5] = p.a * df(zp);
            g.d_log_std[2] = 1.0;
            g
        }
    }
}

impl SequentialModel for Lgssm {
    fn name(&self) -> &'static str {
        "lgssm"
    }

    fn params(&self) -> Vec<f64> {
        markov_params(&self.params)
    }

    fn with_params(&self, params: &[f64]) -> Result<Self> {
        Ok(Self {
            params: markov_from_vec(params, "lgssm")?,
        })
    }

    fn transition(&self, _t: usize, _x: &[f64], z_prev: Option<f64>) -> Gaussian {
        match z_prev {
            None => Gaussian {
                mean: 0.0,
                var: self.params.var_0,
            },
            Some(zp) => Gaussian {
                mean: self.params.a * zp,
                var: self.params.var_z,
            },
        }
    }

    fn transition_grad(&self, _t: usize, _x: &[f64], z_prev: Option<f64>) -> GaussianGrad {
        markov_transition_grad(&self.params, z_prev, |z| z, |_| 1.0)
    }

    fn emission(&self, _t: usize) -> LinearEmission {
        LinearEmission {
            c: self.params.c,
            log_std: 0.5 * self.params.var_x.ln(),
        }
    }

    fn emission_grad(&self, _t: usize) -> LinearEmissionGrad {
        markov_emission_grad(&self.params)
    }

    fn exact_log_marginal(&self, x: &[f64]) -> Result<OracleResult> {
        oracles::kalman_log_marginal(&self.params, x)
    }
}

/// Nonlinear toy SSM: `z_t = a·tanh(z_{t-1}) + noise`, `x_t = c z_t + noise`.
///
/// Same parameter layout as [`Lgssm`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearToy {
    #[serde(flatten)]
    pub params: LgssmParams,
}

impl NonlinearToy {
    pub fn new(params: LgssmParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }
}

impl SequentialModel for NonlinearToy {
    fn name(&self) -> &'static str {
        "nonlinear"
    }

    fn params(&self) -> Vec<f64> {
        markov_params(&self.params)
    }

    fn with_params(&self, params: &[f64]) -> Result<Self> {
        Ok(Self {
            params: markov_from_vec(params, "nonlinear")?,
        })
    }

    fn transition(&self, _t: usize, _x: &[f64], z_prev: Option<f64>) -> Gaussian {
        match z_prev {
            None => Gaussian {
                mean: 0.0,
                var: self.params.var_0,
            },
            Some(zp) => Gaussian {
                mean: self.params.a * zp.tanh(),
                var: self.params.var_z,
            },
        }
    }

    fn transition_grad(&self, _t: usize, _x: &[f64], z_prev: Option<f64>) -> GaussianGrad {
        markov_transition_grad(&self.params, z_prev, f64::tanh, |z| {
            let th = z.tanh();
            1.0 - th * th
        })
    }

    fn emission(&self, _t: usize) -> LinearEmission {
        LinearEmission {
            c: self.params.c,
            log_std: 0.5 * self.params.var_x.ln(),
        }
    }

    fn emission_grad(&self, _t: usize) -> LinearEmissionGrad {
        markov_emission_grad(&self.params)
    }

    /// Grid quadrature; only available for `T ≤ 4`.
    fn exact_log_marginal(&self, x: &[f64]) -> Result<OracleResult> {
        oracles::quadrature_log_marginal(self, x, &GridSpec::auto(801))
    }
}

/// Conjugate model in which `(z_t, x_t)` depends on the past only through
/// `x_{t-1}`: `z_t ~ N(m0 + m1·x_{t-1}, σ²)` (with `x_0 := 0` dropped, so
/// `z_1 ~ N(m0, σ²)`), `x_t ~ N(z_t, r²)`.
///
/// The latents are conditionally independent given the observations, hence
/// `p(z_{1:t-1} | x_{1:t}) = p(z_{1:t-1} | x_{1:t-1})`.
///
/// Parameter vector: `[m0, m1, ln σ, ln r]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugateIndependenceModel {
    pub prior_mean_offset: f64,
    pub prior_mean_slope: f64,
    pub prior_var: f64,
    pub emission_var: f64,
}

impl ConjugateIndependenceModel {
    pub fn new(offset: f64, slope: f64, prior_var: f64, emission_var: f64) -> Result<Self> {
        let m = Self {
            prior_mean_offset: offset,
            prior_mean_slope: slope,
            prior_var,
            emission_var,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.prior_mean_offset.is_finite() || !self.prior_mean_slope.is_finite() {
            return domain("prior mean coefficients must be finite");
        }
        check_var("prior_var", self.prior_var)?;
        check_var("emission_var", self.emission_var)
    }

    /// `μ_t(x_{1:t-1})`.
    pub fn prior_mean(&self, t: usize, x: &[f64]) -> f64 {
        if t == 0 {
            self.prior_mean_offset
        } else {
            self.prior_mean_offset + self.prior_mean_slope * x[t - 1]
        }
    }
}

impl SequentialModel for ConjugateIndependenceModel {
    fn name(&self) -> &'static str {
        "conjugate"
    }

    fn params(&self) -> Vec<f64> {
        vec![
            self.prior_mean_offset,
            self.prior_mean_slope,
            0.5 * self.prior_var.ln(),
            0.5 * self.emission_var.ln(),
        ]
    }

    fn with_params(&self, p: &[f64]) -> Result<Self> {
        check_len(p, 4, "conjugate")?;
        Self::new(p[0], p[1], (2.0 * p[2]).exp(), (2.0 * p[3]).exp())
    }

    fn transition(&self, t: usize, x: &[f64], _z_prev: Option<f64>) -> Gaussian {
        Gaussian {
            mean: self.prior_mean(t, x),
            var: self.prior_var,
        }
    }

    fn transition_grad(&self, t: usize, x: &[f64], _z_prev: Option<f64>) -> GaussianGrad {
        let mut g = GaussianGrad::zeros(self.prior_mean(t, x), 0.5 * self.prior_var.ln(), 4, 0);
        g.d_mean[0] = 1.0;
        if t > 0 {
            g.d_mean[1] = x[t - 1];
        }
        g.d_log_std[2] = 1.0;
        g
    }

    fn emission(&self, _t: usize) -> LinearEmission {
        LinearEmission {
            c: 1.0,
            log_std: 0.5 * self.emission_var.ln(),
        }
    }

    fn emission_grad(&self, t: usize) -> LinearEmissionGrad {
        let mut d_log_std = vec![0.0; 4];
        d_log_std[3] = 1.0;
        LinearEmissionGrad {
            emission: self.emission(t),
            d_c: vec![0.0; 4],
            d_log_std,
        }
    }

    fn exact_log_marginal(&self, x: &[f64]) -> Result<OracleResult> {
        oracles::conjugate_log_marginal(self, x)
    }
}

/// Any of the reference models; the JSON form is tagged by `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnyModel {
    Lgssm(Lgssm),
    Conjugate(ConjugateIndependenceModel),
    Nonlinear(NonlinearToy),
}

impl AnyModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            AnyModel::Lgssm(m) => m.params.validate(),
            AnyModel::Conjugate(m) => m.validate(),
            AnyModel::Nonlinear(m) => m.params.validate(),
        }
    }

    /// The proposal equal to `p(z_t | x_{1:T}, z_{t-1})`, when it is available
    /// in closed form.
    pub fn exact_posterior_proposal(&self) -> Result<AnyProposal> {
        match self {
            AnyModel::Lgssm(m) => Ok(AnyProposal::Smoothing(Box::new(SmoothingProposal {
                base: AnyProposal::Filter,
                backward: BackwardSource::Lgssm(m.params),
            }))),
            AnyModel::Conjugate(_) => Ok(AnyProposal::Filter),
            AnyModel::Nonlinear(_) => Err(Error::Unsupported(
                "nonlinear model has no closed-form posterior".into(),
            )),
        }
    }
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            AnyModel::Lgssm($m) => $e,
            AnyModel::Conjugate($m) => $e,
            AnyModel::Nonlinear($m) => $e,
        }
    };
}

impl SequentialModel for AnyModel {
    fn name(&self) -> &'static str {
        dispatch!(self, m => m.name())
    }

    fn params(&self) -> Vec<f64> {
        dispatch!(self, m => m.params())
    }

    fn with_params(&self, params: &[f64]) -> Result<Self> {
        Ok(match self {
            AnyModel::Lgssm(m) => AnyModel::Lgssm(m.with_params(params)?),
            AnyModel::Conjugate(m) => AnyModel::Conjugate(m.with_params(params)?),
            AnyModel::Nonlinear(m) => AnyModel::Nonlinear(m.with_params(params)?),
        })
    }

    fn transition(&self, t: usize, x: &[f64], z_prev: Option<f64>) -> Gaussian {
        dispatch!(self, m => m.transition(t, x, z_prev))
    }

    fn transition_grad(&self, t: usize, x: &[f64], z_prev: Option<f64>) -> GaussianGrad {
        dispatch!(self, m => m.transition_grad(t, x, z_prev))
    }

    fn emission(&self, t: usize) -> LinearEmission {
        dispatch!(self, m => m.emission(t))
    }

    fn emission_grad(&self, t: usize) -> LinearEmissionGrad {
        dispatch!(self, m => m.emission_grad(t))
    }

    fn exact_log_marginal(&self, x: &[f64]) -> Result<OracleResult> {
        dispatch!(self, m => m.exact_log_marginal(x))
    }
}
