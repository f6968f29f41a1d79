//! Input design for Bayesian identification of nonlinear state-space models.

pub mod designer;
pub mod error;
pub mod noise;
pub mod oracles;
pub mod pcrlb;
pub mod policy;
pub mod smc;
pub mod ssm;

pub use error::{Error, Result};
