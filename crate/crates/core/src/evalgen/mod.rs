//! Toy data, sampling, distribution metrics and diagnostics export.

pub mod chain;
pub mod data;
pub mod export;
pub mod generate;
pub mod metrics;

pub use chain::{chain_bound_check, ChainBound};
pub use data::{DataSource, DatasetKind, DatasetName, PointMass, ToyDataset};
pub use export::{export_diagnostics, Diagnostics};
pub use generate::{default_t_mid, generate, Denoiser, Generation};
pub use metrics::{spearman, w2_exact, w2_sliced, w2_sliced_along, W2_EXACT_CAP};

/// Metrics for one batch of generated samples.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct SampleReport {
    pub n_samples: usize,
    pub nfe: usize,
    pub w2_exact: f64,
    pub w2_sliced: f64,
    pub chain_bound_slack: f64,
    pub seed: u64,
}
