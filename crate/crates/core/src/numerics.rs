//! Log-space arithmetic, weight normalization, Gaussian primitives and the
//! counter-based random stream every stochastic routine draws from.
//!
//! Weights are carried as natural logarithms; `f64::NEG_INFINITY` encodes a
//! zero weight and is a legal value everywhere in this module.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, usage, Error, Result};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Natural log of a nonnegative quantity; `-inf` encodes zero.
pub type LogScalar = f64;

/// `log Σ exp(vᵢ)` by max-shift.
///
/// An all `-inf` input returns `-inf`. A `+inf` entry returns `+inf`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return usage("log_sum_exp of an empty array");
    }
    Ok(lse_unchecked(values))
}

pub(crate) fn lse_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Unnormalized log weights of a particle population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub log_weights: Vec<f64>,
}

impl WeightVector {
    pub fn new(log_weights: Vec<f64>) -> Self {
        Self { log_weights }
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }
}

/// Normalized weights together with the log of the normalizing constant.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub weights: Vec<f64>,
    pub log_norm: f64,
}

/// Normalize log weights into probabilities.
///
/// Fails with [`Error::DegenerateWeights`] when every entry is `-inf`.
pub fn normalize_log_weights(lw: &[f64]) -> Result<Normalized> {
    let log_norm = log_sum_exp(lw)?;
    if log_norm == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    if !log_norm.is_finite() {
        return domain(format!("log weights normalize to {log_norm}"));
    }
    let mut weights: Vec<f64> = lw.iter().map(|v| (v - log_norm).exp()).collect();
    // One correction pass brings the sum to within an ulp or two of 1.
    let total: f64 = weights.iter().sum();
    if total != 1.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    }
    Ok(Normalized { weights, log_norm })
}

/// `log N(x; mean, var)`.
#[inline]
pub fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// `mean + std * noise`, the location-scale reparameterization of a Gaussian.
pub fn gaussian_reparameterize(mean: f64, std: f64, noise: f64) -> Result<f64> {
    if !(std > 0.0) {
        return domain(format!("standard deviation must be positive, got {std}"));
    }
    Ok(mean + std * noise)
}

/// Partial derivatives of [`gaussian_reparameterize`] with respect to
/// `(mean, std)`.
pub fn gaussian_reparameterize_grad(noise: f64) -> (f64, f64) {
    (1.0, noise)
}

/// A univariate Gaussian described by mean and variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian {
    pub fn new(mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) || !var.is_finite() {
            return domain(format!("variance must be positive and finite, got {var}"));
        }
        Ok(Self { mean, var })
    }

    pub fn from_log_std(mean: f64, log_std: f64) -> Self {
        Self {
            mean,
            var: (2.0 * log_std).exp(),
        }
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }

    pub fn log_std(&self) -> f64 {
        0.5 * self.var.ln()
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        log_normal_pdf(x, self.mean, self.var)
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        self.mean + self.std() * rng.standard_normal()
    }

    /// `KL(self ‖ other)`.
    pub fn kl(&self, other: &Gaussian) -> f64 {
        let d = self.mean - other.mean;
        0.5 * ((other.var / self.var).ln() + (self.var + d * d) / other.var - 1.0)
    }
}

/// Roles used to derive independent substreams from a parent stream.
pub mod stream_role {
    pub const REPLICATE: u64 = 1;
    pub const PROPOSAL: u64 = 2;
    pub const RESAMPLE: u64 = 3;
    pub const PRIVILEGED: u64 = 4;
    pub const KERNEL: u64 = 5;
    pub const DATA: u64 = 6;
    pub const BATCH: u64 = 7;
    pub const VALIDATION: u64 = 8;
    pub const AUX: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based random stream keyed by `(seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id in the cipher's nonce, so identical
/// keys reproduce identical draws regardless of thread layout. Child streams
/// come from [`RngStream::derive`]; the library's convention is one child per
/// `(replicate, particle)` for proposal noise and one per replicate for
/// resampling draws.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl PartialEq for RngStream {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.stream_id == other.stream_id && self.position() == other.position()
    }
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// A fresh stream (position 0) whose id is a hash of this stream's id,
    /// `role` and `index`. Does not consume draws from `self`.
    pub fn derive(&self, role: u64, index: u64) -> RngStream {
        let id = splitmix64(splitmix64(self.stream_id ^ splitmix64(role)) ^ index);
        RngStream::new(self.seed, id)
    }

    pub fn replicate(&self, r: u64) -> RngStream {
        self.derive(stream_role::REPLICATE, r)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Serde helpers that keep `±inf`/`NaN` intact in JSON (plain serde_json
/// writes them as `null`).
pub mod serde_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v.is_nan() {
            Repr::Text("nan".into())
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => match s.as_str() {
                "nan" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(E::custom(format!("invalid float literal {other:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let reprs: Vec<Repr> = v.iter().map(|x| to_repr(*x)).collect();
            reprs.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?
                .into_iter()
                .map(from_repr::<D::Error>)
                .collect()
        }
    }
}
