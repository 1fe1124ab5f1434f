//! Pipelines around the `tgcca` solver: simulate datasets, fit models on
//! every fold, summarize alignments and benchmark whitening.

pub mod bench;
pub mod dataset;
pub mod error;
pub mod fit;
pub mod report;
pub mod simulate;

pub use bench::{cmd_bench, BenchConfig, BenchRow};
pub use error::{CliError, Result};
pub use fit::{cmd_fit, FitConfig, ModelConfig};
pub use report::cmd_eval;
pub use simulate::cmd_simulate;
