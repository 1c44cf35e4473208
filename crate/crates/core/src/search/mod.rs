//! Bi-level architecture search and retraining of the derived network.

pub mod config;
pub mod driver;
pub mod hook;
pub mod optim;
pub mod retrain;

pub use config::{AdamConfig, AlphaInit, Simplification, TrainConfig};
pub use driver::{bilevel_search, prepare_supernet, run_search, AbortRecord, Curves, FlowTag, Phase, SearchResult, Split};
pub use hook::{AlphaRegularizer, ConstantPenalty, L2Penalty, NoPenalty};
pub use retrain::{retrain, RetrainConfig, RetrainReport};
