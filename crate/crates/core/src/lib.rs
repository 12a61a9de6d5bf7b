pub mod baselines;
pub mod cli;
pub mod design;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod repbai;
pub mod repbpi;
pub mod rng;
pub mod rounding;
pub mod subspace;

pub use error::{Error, Result};
