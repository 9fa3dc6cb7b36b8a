//! Random walks among random conductances on a periodized lattice:
//! regularized correctors, the martingale decomposition of `xi . X_t`,
//! exact spectral oracles on small tori, and the Monte Carlo experiments
//! that measure Berry-Esseen decay.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod corrector;
pub mod env;
pub mod error;
pub mod experiments;
pub mod reduce;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod walk;

pub use error::{Error, Result};
