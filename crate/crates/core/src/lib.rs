//! Adaptive temporal frame sampling with non-saliency suppression.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod supervision;
pub mod training;

pub use error::{Error, Result};
