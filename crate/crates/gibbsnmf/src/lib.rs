//! Bayesian non-negative matrix factorization by MCMC.

pub mod align;
pub mod chain;
pub mod dist;
pub mod error;
pub mod hypermut;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rank;
pub mod sampler;
pub mod sim;

pub use error::{Error, Result};
