//! Shared fixtures for the benchmarks.

use fivo_core::models::{LearnedGaussian, Lgssm, LgssmParams, SequentialModel};
use fivo_core::numerics::stream_role;
use fivo_core::RngStream;

pub const SEED: u64 = 7;

pub fn lgssm() -> Lgssm {
    Lgssm::new(LgssmParams::new(0.9, 1.0, 0.5, 1.0, 1.0).expect("valid parameters")).expect("valid model")
}

/// A proposal with every coefficient away from zero, so gradients touch
/// all parameters.
pub fn learned_proposal() -> LearnedGaussian {
    LearnedGaussian {
        mean_bias: 0.1,
        mean_zprev: -0.2,
        mean_x: 0.3,
        log_std_bias: -0.2,
        log_std_zprev: 0.05,
        log_std_x: -0.05,
    }
}

pub fn sequence(model: &Lgssm, len: usize) -> Vec<f64> {
    model
        .sample(len, &mut RngStream::new(SEED, 0).derive(stream_role::DATA, len as u64))
        .0
}

/// Log weights spread over several orders of magnitude.
pub fn log_weights(n: usize) -> Vec<f64> {
    let mut rng = RngStream::new(SEED, 1);
    (0..n).map(|_| 2.0 * rng.standard_normal()).collect()
}
