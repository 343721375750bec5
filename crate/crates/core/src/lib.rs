//! Loss-driven mixture of MultVAE experts with adaptive per-user loss
//! weighting, plus the data pipeline and subgroup evaluation used to measure
//! mainstream bias in collaborative filtering.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod expert;
pub mod metrics;
pub mod mixture;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod sync;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use config::{Preset, RunConfig};
pub use corpus::{InteractionSet, MainstreamProfile, SplitDataset, Subgroup};
pub use metrics::BiasReport;

pub type Matrix = tensor::DenseMatrix<f64>;
pub type Expert = expert::ExpertParams<f64>;
pub type Ensemble = mixture::EnsembleModel<f64>;
pub type Gates = mixture::GateTable<f64>;
pub type Sync = sync::SyncState<f64>;
pub type Adam = tensor::AdamState<f64>;
