//! Contrastive pre-training: losses, clustering-based batching and the
//! training loop.

pub mod cluster;
pub mod loss;
pub mod tfidf;
mod trainer;

pub use cluster::{cluster_batches, kmeans, uniform_batches, ClusterBatcher, KMeansConfig, KMeansResult};
pub use loss::{
    barlow_twins_loss, combined_loss, contrastive_loss, BarlowOutput, BatchViews, CombinedOutput, LossOutput,
};
pub use tfidf::{tfidf_featurize, SparseVector, TfidfMatrix};
pub use trainer::{
    mean_within_group_cosine, pretrain, pretrain_loss_and_grads, pretrain_with_projector, write_training_log,
    PretrainConfig, PretrainOutcome, StepLog,
};
