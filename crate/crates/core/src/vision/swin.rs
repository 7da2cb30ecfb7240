use std::sync::Arc;

use rand::Rng;
use volalign_autodiff::{AttentionGroup, AttentionLayout, Float, Graph, ParamId, ParamSet, Tensor, Var};

use crate::nn::{init_tensor, Init, Linear, Mlp, Norm};
use crate::Result;

use super::VisionConfig;

const PATCH: usize = 4;

fn flat(p: [usize; 3], dims: [usize; 3]) -> usize {
    (p[0] * dims[1] + p[1]) * dims[2] + p[2]
}

/// Window partition of a token grid. Windows larger than an axis shrink to
/// that axis, which then gets no shift. Shifted layouts use the cyclic
/// shift of half a window with region masks, expressed directly in
/// original token indices so no roll is materialised.
pub fn window_layout(dims: [usize; 3], window: usize, shifted: bool) -> AttentionLayout {
    let win = dims.map(|n| window.min(n));
    let shift: [usize; 3] = std::array::from_fn(|a| if shifted && dims[a] > window { window / 2 } else { 0 });
    let nwin = std::array::from_fn::<usize, 3, _>(|a| dims[a].div_ceil(win[a]));
    let region = |a: usize, p: usize| -> u8 {
        if shift[a] == 0 || p < dims[a] - win[a] {
            0
        } else if p < dims[a] - shift[a] {
            1
        } else {
            2
        }
    };
    let mut groups = Vec::new();
    for wd in 0..nwin[0] {
        for wh in 0..nwin[1] {
            for ww in 0..nwin[2] {
                let mut tokens = Vec::new();
                let mut labels = Vec::new();
                for od in 0..win[0] {
                    for oh in 0..win[1] {
                        for ow in 0..win[2] {
                            let p = [wd * win[0] + od, wh * win[1] + oh, ww * win[2] + ow];
                            if (0..3).any(|a| p[a] >= dims[a]) {
                                continue;
                            }
                            let orig = std::array::from_fn(|a| (p[a] + shift[a]) % dims[a]);
                            tokens.push(flat(orig, dims));
                            labels.push([region(0, p[0]), region(1, p[1]), region(2, p[2])]);
                        }
                    }
                }
                let n = tokens.len();
                let mask = (shift != [0; 3]).then(|| (0..n * n).map(|i| labels[i / n] == labels[i % n]).collect());
                groups.push(AttentionGroup {
                    queries: tokens.clone(),
                    keys: tokens,
                    mask,
                });
            }
        }
    }
    AttentionLayout { groups }
}

/// Pre-norm window attention block with a GELU feed-forward.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm2: Norm,
    pub mlp: Mlp,
    pub shifted: bool,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(ps: &mut ParamSet<F>, name: &str, component: &str, dim: usize, mlp_ratio: usize, shifted: bool, rng: &mut impl Rng) -> Result<Self> {
        let lin = |ps: &mut ParamSet<F>, n: &str, rng: &mut _| Linear::new(ps, &format!("{name}.{n}"), component, dim, dim, Init::Scaled(dim), rng);
        Ok(Self {
            norm1: Norm::new(ps, &format!("{name}.norm1"), component, dim)?,
            q: lin(ps, "q", rng)?,
            k: lin(ps, "k", rng)?,
            v: lin(ps, "v", rng)?,
            out: lin(ps, "out", rng)?,
            norm2: Norm::new(ps, &format!("{name}.norm2"), component, dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), component, dim, dim * mlp_ratio, rng)?,
            shifted,
        })
    }

    /// `x` is `[tokens, dim]`; returns the block output and the attention
    /// node (for inspecting probability maps).
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: Var, layout: Arc<AttentionLayout>, heads: usize) -> (Var, Var) {
        let h = self.norm1.rows(g, ps, x);
        let q = self.q.forward(g, ps, h);
        let k = self.k.forward(g, ps, h);
        let v = self.v.forward(g, ps, h);
        let att = g.attention(q, k, v, layout, heads);
        let o = self.out.forward(g, ps, att);
        let x = g.add(x, o);
        let h = self.norm2.rows(g, ps, x);
        let h = self.mlp.forward(g, ps, h);
        (g.add(x, h), att)
    }
}

/// Patch embedding, two stages of window attention with a patch merge in
/// between, and a final 2x2x2 average pool so the output grid matches the
/// conv stream.
#[derive(Clone, Debug)]
pub struct TransformerStream {
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub patch_norm: Norm,
    pub stage1: Vec<SwinBlock>,
    pub merge_norm: Norm,
    pub merge: Linear,
    pub stage2: Vec<SwinBlock>,
    pub heads: usize,
    pub window: usize,
    pub dims: [usize; 2],
}

/// Output of [`TransformerStream::forward`].
pub struct SwinOutput {
    /// `[C_f, S]` channel-major grid
    pub grid: Var,
    pub dims: [usize; 3],
    /// attention nodes of every block, in order
    pub attention: Vec<Var>,
}

impl TransformerStream {
    pub fn new<F: Float>(ps: &mut ParamSet<F>, prefix: &str, component: &str, cfg: &VisionConfig, rng: &mut impl Rng) -> Result<Self> {
        let (d1, d2) = (cfg.swin_dim, cfg.feature_channels());
        let fan = PATCH.pow(3);
        let patch_weight = ps.insert(format!("{prefix}.patch.weight"), component, init_tensor(&[d1, fan], Init::Scaled(fan), rng))?;
        let patch_bias = ps.insert(format!("{prefix}.patch.bias"), component, Tensor::zeros([d1]))?;
        let patch_norm = Norm::new(ps, &format!("{prefix}.patch.norm"), component, d1)?;
        let stage = |ps: &mut ParamSet<F>, s: usize, dim: usize, rng: &mut _| -> Result<Vec<SwinBlock>> {
            (0..cfg.swin_depths[s])
                .map(|i| SwinBlock::new(ps, &format!("{prefix}.stage{s}.block{i}"), component, dim, cfg.mlp_ratio, i % 2 == 1, rng))
                .collect()
        };
        let stage1 = stage(ps, 0, d1, rng)?;
        let merge_norm = Norm::new(ps, &format!("{prefix}.merge.norm"), component, 8 * d1)?;
        let merge = Linear::new(ps, &format!("{prefix}.merge"), component, 8 * d1, d2, Init::Scaled(8 * d1), rng)?;
        let stage2 = stage(ps, 1, d2, rng)?;
        Ok(Self {
            patch_weight,
            patch_bias,
            patch_norm,
            stage1,
            merge_norm,
            merge,
            stage2,
            heads: cfg.heads,
            window: cfg.window,
            dims: [d1, d2],
        })
    }

    fn run_stage<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, blocks: &[SwinBlock], mut x: Var, dims: [usize; 3], maps: &mut Vec<Var>) -> Var {
        let regular = Arc::new(window_layout(dims, self.window, false));
        let shifted = Arc::new(window_layout(dims, self.window, true));
        for b in blocks {
            let layout = if b.shifted { shifted.clone() } else { regular.clone() };
            let (y, att) = b.forward(g, ps, x, layout, self.heads);
            maps.push(att);
            x = y;
        }
        x
    }

    /// `x` is the padded volume as `[1, D*H*W]` with every edge a multiple
    /// of 16.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: Var, dims: [usize; 3]) -> SwinOutput {
        debug_assert!(dims.iter().all(|n| n % 16 == 0));
        let mut attention = Vec::new();
        let w = g.param(ps, self.patch_weight);
        let b = g.param(ps, self.patch_bias);
        let t = g.conv3d(x, w, 1, dims, PATCH, PATCH, 0);
        let t = g.add_col(t, b);
        let t = g.transpose(t);
        let t = self.patch_norm.rows(g, ps, t);
        let g1 = dims.map(|n| n / PATCH);
        let t = self.run_stage(g, ps, &self.stage1, t, g1, &mut attention);

        let g2 = g1.map(|n| n / 2);
        let parts = neighbour_gathers(g, t, g1);
        let t = g.concat_cols(&parts);
        let t = self.merge_norm.rows(g, ps, t);
        let t = self.merge.forward(g, ps, t);
        let t = self.run_stage(g, ps, &self.stage2, t, g2, &mut attention);

        let g3 = g2.map(|n| n / 2);
        let pool = g.constant(avg_pool_matrix(g2));
        let t = g.matmul(pool, t);
        SwinOutput {
            grid: g.transpose(t),
            dims: g3,
            attention,
        }
    }
}

/// One `[S/8, C]` gather per 2x2x2 offset, for patch merging.
fn neighbour_gathers<F: Float>(g: &mut Graph<F>, x: Var, dims: [usize; 3]) -> Vec<Var> {
    let half = dims.map(|n| n / 2);
    let mut parts = Vec::with_capacity(8);
    for o in 0..8 {
        let off = [o >> 2 & 1, o >> 1 & 1, o & 1];
        let mut idx = Vec::with_capacity(half.iter().product());
        for d in 0..half[0] {
            for h in 0..half[1] {
                for w in 0..half[2] {
                    idx.push(flat([2 * d + off[0], 2 * h + off[1], 2 * w + off[2]], dims));
                }
            }
        }
        parts.push(g.gather_rows(x, idx));
    }
    parts
}

/// `[S/8, S]` matrix averaging each 2x2x2 cell.
fn avg_pool_matrix<F: Float>(dims: [usize; 3]) -> Tensor<F> {
    let half = dims.map(|n| n / 2);
    let s: usize = dims.iter().product();
    let so: usize = half.iter().product();
    let mut m = Tensor::zeros([so, s]);
    let eighth = F::from_f64_lossy(0.125);
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let r = flat([d / 2, h / 2, w / 2], half);
                m.data_mut()[r * s + flat([d, h, w], dims)] = eighth;
            }
        }
    }
    m
}
