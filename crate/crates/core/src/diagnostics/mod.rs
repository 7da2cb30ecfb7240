//! Gradient-weighted activation maps, exact t-SNE, and optional PNG
//! renderings of both.

mod cam;
mod render;
mod tsne;

pub use cam::{cam_map, cam_map_sample, upsample_cell_centred, CamVolume, CAM_MODALITY};
pub use render::{render_cam_png, render_tsne_png};
pub use tsne::{tsne_embed, TsneConfig, TsneResult};
