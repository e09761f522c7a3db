//! Stable distillation for continued self-supervised pretraining.
//!
//! A small sequence encoder is pretrained with a masked contrastive
//! objective on a source domain, continued-pretrained on a low-resource
//! target domain (the teacher), and then a fresh copy of the pretrained
//! model (the student) is continued-pretrained while its final-layer
//! representations are pulled toward the teacher's with an MSE penalty.
//! Students and baselines are fine-tuned end to end with CTC and scored
//! by token error rate on a synthetic two-domain corpus.

mod binio;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod ctc;
pub mod distill;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod graph;
pub mod kv;
pub mod model;
pub mod pipeline;
pub mod pretext;
pub mod tensor;

pub use error::{Error, FormatError, Result, TensorError};
pub use graph::{Graph, NodeId, Segment};
pub use tensor::{Element, Tensor};
