//! Autoregressive concrete creep prediction with a triple-attention
//! transformer: model, data pipeline, training, rollout and attribution.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod infer;
pub mod model;
pub mod train;

pub use config::{AblationSpec, AblationVariant, RunConfig, TataConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{BatchInput, BatchScope, SequenceRow, TataModel};
