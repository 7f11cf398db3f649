//! Dimension search and structured pruning for windowed-attention
//! transformer backbones.
//!
//! Each prunable site (the query/key/value embeddings of an attention module,
//! or the hidden layer of an MLP) carries a learnable diagonal scoring matrix.
//! Training with an L1 penalty on the scores sparsifies them; surgery then
//! keeps the highest-magnitude dimensions, folds the scores into the surviving
//! weights, and the smaller model is fine-tuned from that warm start.
//!
//! Runnable walkthroughs live in `examples/`:
//!
//! ```bash
//! cargo run --release --example cost_table
//! cargo run --release --example search_prune_finetune
//! ```

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod pruner;
pub mod report;
pub mod scoring;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var, VarId};
pub use error::{Error, Result};
pub use nn::{Backbone, BackboneConfig};
pub use scoring::{attach_scores, ScoreTable, ScoredModel, SiteId, SiteKind};
pub use tensor::{Element, Tensor};
