//! Fine-tuning model: conv and attention streams, report gating,
//! bidirectional cross-attention fusion and the classification head.

mod cct;
mod gate;
mod model;

pub use cct::{grid_coordinates, Cct, CctBlock, CrossAttention};
pub use gate::{modulate, text_modulate, Gate};
pub use model::{
    branch_component, csa_forward, prepare_samples, AblationFlags, CsaIntermediates, CsaModel, CsaNet, ForwardVars, LossVars, ModelConfig, Sample,
};

/// Per-class sigmoid probabilities of raw logits.
pub fn classify(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect()
}
