//! Optimiser, checkpoint container, metrics, fine-tuning, evaluation and
//! the ablation harness.

mod ablate;
pub mod checkpoint;
mod evaluate;
mod finetune;
mod metrics;
mod optim;

pub use ablate::{ablate, ablation_csv, AblationRow, ABLATION_ROWS};
pub use checkpoint::{params_sha256, Blob, ComponentInfo, ModelCheckpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use evaluate::{evaluate, evaluate_model, predict};
pub use finetune::{finetune, finetune_samples, history_csv, EpochRecord, FinetuneConfig, FinetuneOutcome};
pub use metrics::{accuracy, auc, brute_force_auc, macro_auc, MetricsReport};
pub use optim::{AdamW, AdamWConfig, GradBuffer};

/// Index of the largest value; the first one on ties.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
