//! Gaussian-process posterior predictive distributions computed three ways:
//! in closed form, by Richardson iteration on the kernel ridge system, and by
//! a hand-constructed attention stack that runs the same iteration layer by
//! layer. Predictions are turned into binned distributions by an
//! exponential-family head and scored with TV, coverage, CRPS and moment
//! metrics.

pub mod attention;
pub mod datagen;
pub mod error;
pub mod gp;
pub mod head;
pub mod kernels;
pub mod linalg;
pub mod normal;
pub mod richardson;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
