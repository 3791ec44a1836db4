//! Training loop, evaluation, analytics, benchmarks and gradient checks.

pub mod analytics;
pub mod bench;
pub mod config;
pub mod gradsuite;
pub mod model;
pub mod train;

use std::path::{Path, PathBuf};

pub use analytics::{efficiency_stats, stability_stats, EfficiencyStats, StabilityStats};
pub use bench::{bench_scan, kernel_slopes, BenchConfig, BenchRow, CountingAlloc};
pub use config::{parse_seeds, RunConfig, Variant};
pub use gradsuite::{run_gradcheck, Component, GradReport};
pub use model::FusionModel;
pub use train::{evaluate_checkpoint, metrics_from_dir, random_policy_eval, train, train_seed, RunMetrics, Trainer};

use crate::diffcore::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("analytics: {0}")]
    Analytics(String),
    #[error("training diverged at iteration {iteration}; diagnostics in {}", dump.display())]
    Diverged { iteration: usize, dump: PathBuf },
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
