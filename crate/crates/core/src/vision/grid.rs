use volalign_autodiff::{Float, Tensor};

use crate::data::{pad_to_multiple, Volume};
use crate::{Error, Result};

/// Downsampling factor of both streams.
pub const TOTAL_STRIDE: usize = 16;
/// Smallest accepted input edge (one attention patch).
pub const MIN_EDGE: usize = 4;

/// Channelled 3D feature tensor, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub dims: [usize; 3],
    pub stride: usize,
    /// `[channels, D*H*W]`, row-major
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn from_tensor<F: Float>(t: &Tensor<F>, dims: [usize; 3], stride: usize) -> Self {
        let (channels, s) = t.dims2();
        debug_assert_eq!(s, dims.iter().product::<usize>());
        Self {
            channels,
            dims,
            stride,
            data: t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense vector in the shared embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector {
    pub vector: Vec<f32>,
    pub normalized: bool,
}

/// Reject volumes below one patch and edge-pad the rest to a multiple of
/// [`TOTAL_STRIDE`].
pub fn prepare_input(v: &Volume) -> Result<Volume> {
    let dims = v.dims();
    if dims.iter().any(|&n| n < MIN_EDGE) {
        return Err(Error::InputTooSmall { dims, min: MIN_EDGE });
    }
    if let Some(i) = v.first_non_finite() {
        return Err(Error::NonFiniteVoxel(i));
    }
    Ok(pad_to_multiple(v, TOTAL_STRIDE))
}

