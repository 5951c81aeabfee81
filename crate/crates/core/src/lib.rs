//! Self-supervised contrastive item embeddings and the matching pipelines
//! built on them: entity matching, error correction and column matching.

pub mod augment;
pub mod blocking;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod matcher;
pub mod optim;
pub mod pretrain;
pub mod pseudolabel;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
