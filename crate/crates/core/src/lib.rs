//! Adaptive preference optimization on a desk-scale lab: a minority-aware
//! metric over an ensemble of recent checkpoints, reweighted and margined
//! DPO/IPO losses, synthetic preference data with controllable label flips,
//! a toy diffusion backend and the evaluation needed to compare methods.

pub mod config;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod metric;
pub mod mlp;
pub mod objective;
pub mod policy;
pub mod rng;
pub mod trainer;
pub mod types;

pub use config::{
    Backend, C2Policy, LossConfig, Margin, Method, Objective, Optimizer, Reweight, TrainConfig,
};
pub use error::{Error, Result};
pub use types::{PreferencePair, RunRecord};
