//! Cross-layer attention sharing for decoder-only transformers.
//!
//! The crate covers the whole workflow: measure how similar the attention
//! probabilities of different layers are ([`analysis`]), turn that into a
//! [`SharingPlan`], build a student whose shared layers reuse a root layer's
//! attention and carry no Q/K projections ([`model`]), train it against the
//! dense teacher with a two-stage distillation ([`distill`]), and account
//! for the parameter and compute savings ([`bench`]).

pub mod analysis;
pub mod bench;
pub mod data;
pub mod distill;
pub mod error;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use analysis::{LayerSelection, SimilarityReport};
pub use bench::BenchReport;
pub use data::{Batch, BatchPlan, Batcher, Corpus, Tokenizer};
pub use distill::{DistillConfig, KlDirection};
pub use error::{Error, Result};
pub use model::{ModelConfig, SharingPlan, TokenBatch, TransformerModel};
pub use optim::{AdamW, AdamWConfig, CosineSchedule};
pub use tensor::{Graph, Tensor, Var};
pub use train::{StepRecord, TrainReport};
