//! Hierarchical classification of long documents from overlapping chunk
//! embeddings, unsupervised structure labels and a transformer head, with
//! occlusion-based extraction of the sentences that drive each prediction.

pub mod chunker;
pub mod config;
pub mod corpus;
pub mod embedder;
pub mod encoder;
pub mod error;
pub mod head;
pub mod metrics;
pub mod nn;
pub mod orse;
pub mod pipeline;
pub mod store;
pub mod structurer;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
