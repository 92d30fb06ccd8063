//! Dual-head causal transformer policy for sepsis treatment, trained on both
//! surviving and fatal ICU trajectories with a frozen mortality classifier as
//! feedback. Also provides the Decision Transformer and behaviour cloning
//! baselines, the synthetic cohort, and evaluation.

pub mod artifacts;
pub mod autodiff;
pub mod classifier;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod training;

pub use classifier::{FrozenClassifier, MortalityClassifier};
pub use data::{ActionPair, DatasetSplit, Outcome, PatientState, Trajectory};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use model::{DualSight, DualSightConfig, ModelKind};
pub use training::{DMTrainConfig, LossWeights};
