pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod relate;
pub mod rng;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
