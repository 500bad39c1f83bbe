//! Guided diffusion at desk scale: samplers, guidance, training, and
//! evaluation for Gaussian-mixture data, where the score, the noisy
//! classifier, and the class-conditional target all have closed forms that
//! double as verification oracles.

pub mod checkpoint;
pub mod config;
pub mod csvio;
pub mod error;
pub mod harness;
pub mod classifiers;
pub mod metrics;
pub mod mixture;
pub mod models;
pub mod process;
pub mod samplers;
pub mod schedules;
pub mod svg;
pub mod training;

pub use error::{Error, Result};
