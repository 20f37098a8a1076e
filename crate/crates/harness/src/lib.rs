//! Training, evaluation and ablation runs behind the `semvlp` command line.

pub mod attention;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod run;
pub mod sweeps;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
