pub mod error;
pub mod estimators;
pub mod harness;
pub mod models;
pub mod mrw;
pub mod optimizer;
pub mod rng;
pub mod stats;
pub mod tilting;

pub use error::{Error, Result};
