use rand::Rng;
use volalign_autodiff::{Float, Graph, ParamSet, Tensor, Var};

use crate::nn::{Init, Linear};
use crate::Result;

/// Spatial mean per channel, affine map to `E`, L2 normalisation.
#[derive(Clone, Debug)]
pub struct GlobalPool {
    pub proj: Linear,
}

impl GlobalPool {
    pub fn new<F: Float>(ps: &mut ParamSet<F>, name: &str, component: &str, channels: usize, embed: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(ps, &format!("{name}.proj"), component, channels, embed, Init::Scaled(channels), rng)?,
        })
    }

    /// Channel means of a `[C, S]` grid as a `[1, C]` row.
    pub fn spatial_mean<F: Float>(g: &mut Graph<F>, grid: Var) -> Var {
        let (c, s) = g.value(grid).dims2();
        let avg = g.constant(Tensor::full([s, 1], F::one() / F::from_usize(s).unwrap()));
        let m = g.matmul(grid, avg);
        g.reshape(m, [1, c])
    }

    /// Unit-norm `[1, E]` embedding of a `[C, S]` grid.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, grid: Var) -> Var {
        let m = Self::spatial_mean(g, grid);
        let y = self.proj.forward(g, ps, m);
        g.l2_normalize_rows(y)
    }
}
