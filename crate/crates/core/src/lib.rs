//! Multi-behavior recommendation with contrastive learning between behavior
//! views and meta-learned, per-user loss weights.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`sparse`] and [`tape`]: dense/sparse linear algebra and a
//!   define-by-run autodiff tape with reverse and forward sweeps.
//! * [`data`] and [`graph`]: interaction logs, leave-one-out splits and the
//!   per-behavior adjacency.
//! * [`encoder`]: behavior-aware propagation and cross-behavior aggregation.
//! * [`contrastive`]: InfoNCE between the target view and each auxiliary view.
//! * [`meta`]: meta-knowledge construction and the weighting network.
//! * [`trainer`]: BPR objective, optimisers and the three-phase bilevel loop.
//! * [`eval`]: leave-one-out HR@K / NDCG@K.
//! * [`pipeline`]: the prepare → train → evaluate → export workflow used by the CLI.

pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod meta;
pub mod model;
pub mod pipeline;
#[cfg(test)]
mod properties;
pub mod sparse;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use config::{Ablation, Similarity, TrainConfig};
pub use data::{InputFormat, Interaction, InteractionStore, SplitAssignment, SplitOptions};
pub use error::{CmlError, Result};
pub use eval::{MetricReport, Protocol};
pub use graph::BehaviorGraph;
pub use model::{MetaParams, ModelParams};
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
