//! Symmetric volume/report contrastive objective and per-modality expert
//! pretraining.

mod loss;
mod pretrain;
mod retrieval;

pub use loss::{loss_t2v, loss_v2t, similarity_matrix, symmetric_loss, symmetric_loss_graph, SimilarityMatrix};
pub use pretrain::{pretrain_modality, pretrain_samples, PretrainConfig, PretrainOutcome};
pub use retrieval::{retrieval_top1, RetrievalReport};
