//! Click-through-rate prediction from user behavior sequences with
//! time-aware long- and short-term interest modeling.
//!
//! The crate is organized bottom-up: a small reverse-mode autodiff core
//! ([`graph`], [`params`], [`tensor`]), timestamp featurization
//! ([`temporal`]), behavior-log handling ([`data`]), the model itself
//! ([`model`]), and training, evaluation and persistence on top.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{DiceStats, Graph, NodeId};
pub use metrics::{auc, logloss, ExampleRecord, MetricsReport};
pub use model::{ModelConfig, TlsiModel, Variant};
pub use params::{Gradients, ParamId, ParamStore};
pub use temporal::{DatasetClock, Timestamp};
pub use tensor::DenseArray;
pub use train::{evaluate, train, Adam, AdamConfig, TrainConfig, TrainReport};
