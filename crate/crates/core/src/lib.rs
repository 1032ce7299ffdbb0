//! Consistency-model training with adaptively discretized time grids.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors, a small MLP with forward-mode and
//!   reverse-mode differentiation, Adam and EMA.
//! - [`schedule`]: noise schedules, preconditioning coefficients and
//!   time sampling over a segmentation grid.
//! - [`consistency`]: the preconditioned consistency function, its
//!   trajectory tangent, distance metrics and the ratio loss.
//! - [`discretizer`]: the closed-form Gauss-Newton step, the grid
//!   simulation loop, baseline grids and a brute-force step oracle.
//! - [`trainer`]: the alternating grid/parameter loop, configuration,
//!   checkpoints and run manifests.
//! - [`evalgen`]: toy datasets, one- and two-step generation,
//!   Wasserstein metrics, the accumulated-error chain check and CSV/SVG
//!   export.

pub mod consistency;
pub mod discretizer;
pub mod error;
pub mod evalgen;
pub mod numerics;
pub mod schedule;
pub mod trainer;

pub use consistency::{ConsistencyModel, DistanceMetric, MetricKind, WeightingConfig, WeightingMode};
pub use discretizer::{BaselineScheduleKind, SegmentationGrid, SolverConfig};
pub use error::{Error, Result};
pub use numerics::{Activation, Adam, DualTensor, EmaState, MlpParams, Tensor};
pub use schedule::{NoiseSchedule, PrecondKind, Preconditioner, ScheduleKind, TimeSampler};
pub use trainer::{TrainConfig, Trainer};
