use rand::Rng;
use volalign_autodiff::{Float, Graph, ParamId, ParamSet, Tensor, Var};

use crate::nn::{init_tensor, Init, Norm};
use crate::Result;

const KERNEL: usize = 3;

/// Strided 3D convolution, channel normalisation, SiLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Norm,
    pub cin: usize,
    pub cout: usize,
}

impl ConvBlock {
    pub fn new<F: Float>(ps: &mut ParamSet<F>, name: &str, component: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        let fan_in = cin * KERNEL.pow(3);
        let weight = ps.insert(format!("{name}.weight"), component, init_tensor(&[cout, fan_in], Init::He(fan_in), rng))?;
        let bias = ps.insert(format!("{name}.bias"), component, Tensor::zeros([cout]))?;
        let norm = Norm::new(ps, &format!("{name}.norm"), component, cout)?;
        Ok(Self { weight, bias, norm, cin, cout })
    }

    /// `x` is `[cin, D*H*W]`; returns the activation and its grid dims.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: Var, dims: [usize; 3]) -> (Var, [usize; 3]) {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let y = g.conv3d(x, w, self.cin, dims, KERNEL, 2, 1);
        let y = g.add_col(y, b);
        let y = self.norm.channels(g, ps, y);
        (g.silu(y), dims.map(|n| (n - 1) / 2 + 1))
    }
}

/// Four stride-2 blocks; total stride 16.
#[derive(Clone, Debug)]
pub struct ConvStream {
    pub blocks: Vec<ConvBlock>,
}

impl ConvStream {
    pub fn new<F: Float>(ps: &mut ParamSet<F>, prefix: &str, component: &str, channels: &[usize; 4], rng: &mut impl Rng) -> Result<Self> {
        let mut cin = 1;
        let mut blocks = Vec::with_capacity(4);
        for (i, &cout) in channels.iter().enumerate() {
            blocks.push(ConvBlock::new(ps, &format!("{prefix}.block{i}"), component, cin, cout, rng)?);
            cin = cout;
        }
        Ok(Self { blocks })
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(1, |b| b.cout)
    }

    /// `x` is the padded volume as `[1, D*H*W]`; returns `f_v` as
    /// `[C_f, D'*H'*W']` with its grid dims.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: Var, dims: [usize; 3]) -> (Var, [usize; 3]) {
        self.blocks.iter().fold((x, dims), |(x, d), b| b.forward(g, ps, x, d))
    }
}
