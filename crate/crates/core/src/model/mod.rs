//! Decoder-only transformer with optional cross-layer attention sharing.

pub mod checkpoint;
mod config;
mod plan;
mod transformer;

pub use config::ModelConfig;
pub use plan::SharingPlan;
pub use transformer::{
    build_student, removed_parameters, AttentionTrace, ForwardPass, LayerWeights, TokenBatch, TransformerModel,
};
