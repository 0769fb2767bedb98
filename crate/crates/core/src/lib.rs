//! Deterministic desk-scale simulator and aggregation library for federated
//! learning under hybrid data regimes: a bounded atlas of client model
//! updates, data-guided merging-coefficient search (in-domain and
//! out-of-domain variants with a fallback mechanism), classical asynchronous
//! baselines, and the diagnostics needed to compare them reproducibly.

pub mod analysis;
pub mod atlas;
pub mod datagen;
pub mod error;
pub mod merge;
pub mod nn;
pub mod rng;
pub mod simulator;

pub use analysis::{MetricsLine, MetricsRecord, RunSummary};
pub use atlas::{Anchor, AnchorMeta, Atlas};
pub use datagen::{DelayModel, NoiseSpec, PartitionPlan, SyntheticTaskSpec};
pub use error::{CoreError, Result};
pub use merge::{CoefficientVector, SearchConfig, ServerLr, SurrogateHead};
pub use nn::{Activation, Batch, ModelSpec, ParamVector, TrainConfig};
pub use simulator::{run_experiment, Aggregator, ExperimentConfig, RunOutput};
