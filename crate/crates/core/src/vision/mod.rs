//! 3D vision encoders: the convolutional stream, the shifted-window
//! attention stream, global pooling and the per-modality expert bank.
//!
//! Feature grids are channel-major `[C, D*H*W]` on the graph; attention
//! tokens are row-major `[tokens, width]`.

mod conv;
mod expert;
mod grid;
mod pool;
mod swin;

pub use conv::{ConvBlock, ConvStream};
pub use expert::{vision_encode, Expert, ExpertNet, ModalityExpertBank, EXPERT_COMPONENT};
pub use grid::{prepare_input, EmbeddingVector, FeatureGrid, MIN_EDGE, TOTAL_STRIDE};
pub use pool::GlobalPool;
pub use swin::{window_layout, SwinBlock, SwinOutput, TransformerStream};

use serde::{Deserialize, Serialize};

/// Architecture sizes shared by the experts and the fine-tuning model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    /// Output channels of the four conv blocks; the last is `C_f`.
    pub conv_channels: [usize; 4],
    /// Token width of the first attention stage; the second uses `C_f`.
    pub swin_dim: usize,
    pub swin_depths: [usize; 2],
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    /// Shared embedding dimension `E`.
    pub embed_dim: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            conv_channels: [16, 32, 64, 64],
            swin_dim: 32,
            swin_depths: [2, 2],
            heads: 4,
            window: 2,
            mlp_ratio: 2,
            embed_dim: 128,
        }
    }
}

impl VisionConfig {
    pub fn feature_channels(&self) -> usize {
        self.conv_channels[3]
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::Config(m.into()));
        if self.conv_channels.contains(&0) || self.swin_dim == 0 || self.embed_dim == 0 {
            return bad("vision widths must be positive");
        }
        if self.heads == 0 || self.swin_dim % self.heads != 0 || self.feature_channels() % self.heads != 0 {
            return bad("attention heads must divide swin_dim and the feature channel count");
        }
        if self.window == 0 || self.mlp_ratio == 0 {
            return bad("window and mlp_ratio must be positive");
        }
        Ok(())
    }
}
