//! Monte Carlo objectives (ELBO, IWAE, FIVO, AIS, MIS) for sequential
//! latent-variable models, with particle filtering, gradient estimators,
//! conditional SMC, exact oracles and a small training loop.

pub mod csmc;
pub mod diagnostics;
pub mod error;
pub mod gradients;
pub mod models;
pub mod numerics;
pub mod objectives;
pub mod oracles;
pub mod smc;
pub mod stats;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::{Gaussian, RngStream};
