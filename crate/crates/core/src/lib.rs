//! Modality-aware 3D volume/report alignment and cross-modal fusion.
//!
//! Two training stages share one set of building blocks:
//!
//! 1. per-modality contrastive pretraining of a 3D convolutional expert
//!    against frozen report embeddings ([`contrastive`]);
//! 2. fine-tuning of a dual-stream fusion classifier: the expert's conv
//!    stream, a shifted-window attention stream gated by the projected
//!    report, and bidirectional cross-attention fusion ([`fusion`]),
//!    optimised with a scheduled BCE + KL objective ([`objectives`]).
//!
//! [`data`] provides the MVOL volume format and a phantom generator,
//! [`train`] the optimiser, checkpoints, metrics and the ablation
//! harness, and [`diagnostics`] CAM heatmaps and t-SNE.

pub mod config;
pub mod contrastive;
pub mod data;
pub mod diagnostics;
mod error;
pub mod fusion;
pub mod nn;
pub mod objectives;
pub mod text;
pub mod train;
pub mod vision;

pub use error::{Error, Result};

/// 64-bit FNV-1a; stable across runs and platforms.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
