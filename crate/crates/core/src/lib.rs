//! Non-contrastive mutual-information representation learning at desk scale.
//!
//! The crate covers the whole chain from the α-divergence family down to a
//! training loop: exact finite joint distributions and their affinity matrix
//! `M`, a small differentiable encoder, contrastive and non-contrastive
//! objectives with analytic gradients, an exact power-iteration oracle and
//! evaluation probes.

#![allow(clippy::needless_range_loop)]

pub mod dataset;
pub mod divergence;
pub mod encoder;
pub mod error;
pub mod linalg;
pub mod objective;
pub mod power;
pub mod probe;
pub mod trainer;

pub use dataset::{BlockGraphParams, Dataset, FeatureTable, JointDistribution};
pub use divergence::AlphaDivergence;
pub use encoder::{EmbeddingModel, GradientBuffer};
pub use error::{Error, Result};
pub use linalg::{EigenDecomposition, Matrix};
pub use objective::{AuxiliaryState, Batch, MincConfig};
pub use power::{OracleReport, PowerIterState};
pub use probe::{CollapseMetrics, EstimatorStats, ProbeResult, RepulsiveEstimator};
pub use trainer::{train, LossKind, LrSchedule, MetricsRecord, TrainConfig, TrainError, TrainRun};
