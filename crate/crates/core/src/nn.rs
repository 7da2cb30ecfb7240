//! Parameterised layers shared by the vision, text and fusion modules.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use volalign_autodiff::{Float, Graph, ParamId, ParamSet, Tensor, Var};

use crate::Result;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// N(0, 2 / fan_in)
    He(usize),
    /// N(0, 1 / fan_in)
    Scaled(usize),
    /// ones on the main diagonal of a matrix
    Identity,
}

pub fn init_tensor<F: Float>(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor<F> {
    let mut normal = |std: f64| {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape.to_vec(), |_| F::from_f64_lossy(dist.sample(rng)))
    };
    match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Ones => Tensor::full(shape.to_vec(), F::one()),
        Init::Normal(std) => normal(std),
        Init::He(fan_in) => normal((2.0 / fan_in as f64).sqrt()),
        Init::Scaled(fan_in) => normal((1.0 / fan_in as f64).sqrt()),
        Init::Identity => {
            let cols = *shape.last().unwrap_or(&1);
            Tensor::from_fn(shape.to_vec(), |i| if i / cols == i % cols { F::one() } else { F::zero() })
        }
    }
}

/// `y = x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        ps: &mut ParamSet<F>,
        name: &str,
        component: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = ps.insert(format!("{name}.weight"), component, init_tensor(&[d_in, d_out], init, rng))?;
        let b = ps.insert(format!("{name}.bias"), component, Tensor::zeros([d_out]))?;
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Affine normalisation parameters; applied over rows or over channels.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<F: Float>(ps: &mut ParamSet<F>, name: &str, component: &str, dim: usize) -> Result<Self> {
        let gamma = ps.insert(format!("{name}.gamma"), component, Tensor::full([dim], F::one()))?;
        let beta = ps.insert(format!("{name}.beta"), component, Tensor::zeros([dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn rows<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: Var) -> Var {
        let (ga, be) = (g.param(ps, self.gamma), g.param(ps, self.beta));
        g.layer_norm_rows(x, ga, be, F::from_f64_lossy(NORM_EPS))
    }

    pub fn channels<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: Var) -> Var {
        let (ga, be) = (g.param(ps, self.gamma), g.param(ps, self.beta));
        g.channel_norm(x, ga, be, F::from_f64_lossy(NORM_EPS))
    }
}

/// Two-layer GELU feed-forward.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Float>(ps: &mut ParamSet<F>, name: &str, component: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), component, dim, hidden, Init::Scaled(dim), rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), component, hidden, dim, Init::Scaled(hidden), rng)?,
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: Var) -> Var {
        let h = self.fc1.forward(g, ps, x);
        let h = g.gelu(h);
        self.fc2.forward(g, ps, h)
    }
}

/// Row-wise L2 norms of a `[n, d]` value, for degenerate-vector checks.
pub fn row_norms<F: Float>(t: &Tensor<F>) -> Vec<f64> {
    let (n, d) = t.dims2();
    (0..n)
        .map(|i| {
            t.data()[i * d..(i + 1) * d]
                .iter()
                .map(|v| v.to_f64_lossy().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}
