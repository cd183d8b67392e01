//! Operator learning with DeepONets and split conformal prediction
//! intervals.

pub mod conformal;
pub mod datagen;
pub mod evaluation;
mod error;
pub mod nn;
pub mod operator;
pub mod textio;
pub mod training;

pub use error::{Error, Result};
