pub mod autodiff;
pub mod cli;
pub mod divergence;
pub mod evaluation;
pub mod error;
pub mod merging;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tasks;
pub mod theory_checks;
pub mod train;

pub use error::{Error, Result};
