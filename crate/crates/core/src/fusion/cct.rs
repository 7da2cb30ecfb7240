use std::sync::Arc;

use rand::Rng;
use volalign_autodiff::{AttentionGroup, AttentionLayout, Float, Graph, ParamId, ParamSet, Tensor, Var};

use crate::nn::{init_tensor, Init, Linear, Mlp, Norm};
use crate::Result;

/// Queries from one token set, keys and values from the other.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl CrossAttention {
    fn new<F: Float>(ps: &mut ParamSet<F>, name: &str, component: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut lin = |n: &str| Linear::new(ps, &format!("{name}.{n}"), component, dim, dim, Init::Scaled(dim), rng);
        Ok(Self {
            q: lin("q")?,
            k: lin("k")?,
            v: lin("v")?,
            out: lin("out")?,
        })
    }

    fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, queries: Var, context: Var, layout: Arc<AttentionLayout>, heads: usize) -> (Var, Var) {
        let q = self.q.forward(g, ps, queries);
        let k = self.k.forward(g, ps, context);
        let v = self.v.forward(g, ps, context);
        let att = g.attention(q, k, v, layout, heads);
        (self.out.forward(g, ps, att), att)
    }
}

/// Both token sets attend to each other simultaneously, then each gets its
/// own feed-forward.
#[derive(Clone, Debug)]
pub struct CctBlock {
    pub norm_a: Norm,
    pub norm_b: Norm,
    pub a_from_b: CrossAttention,
    pub b_from_a: CrossAttention,
    pub norm_a2: Norm,
    pub norm_b2: Norm,
    pub mlp_a: Mlp,
    pub mlp_b: Mlp,
}

impl CctBlock {
    fn new<F: Float>(ps: &mut ParamSet<F>, name: &str, component: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm_a: Norm::new(ps, &format!("{name}.norm_a"), component, dim)?,
            norm_b: Norm::new(ps, &format!("{name}.norm_b"), component, dim)?,
            a_from_b: CrossAttention::new(ps, &format!("{name}.a_from_b"), component, dim, rng)?,
            b_from_a: CrossAttention::new(ps, &format!("{name}.b_from_a"), component, dim, rng)?,
            norm_a2: Norm::new(ps, &format!("{name}.norm_a2"), component, dim)?,
            norm_b2: Norm::new(ps, &format!("{name}.norm_b2"), component, dim)?,
            mlp_a: Mlp::new(ps, &format!("{name}.mlp_a"), component, dim, 2 * dim, rng)?,
            mlp_b: Mlp::new(ps, &format!("{name}.mlp_b"), component, dim, 2 * dim, rng)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, a: Var, b: Var, layout: &Arc<AttentionLayout>, heads: usize, maps: &mut Vec<Var>) -> (Var, Var) {
        let an = self.norm_a.rows(g, ps, a);
        let bn = self.norm_b.rows(g, ps, b);
        let (da, ma) = self.a_from_b.forward(g, ps, an, bn, layout.clone(), heads);
        let (db, mb) = self.b_from_a.forward(g, ps, bn, an, layout.clone(), heads);
        maps.extend([ma, mb]);
        let a = g.add(a, da);
        let b = g.add(b, db);
        let h = self.norm_a2.rows(g, ps, a);
        let h = self.mlp_a.forward(g, ps, h);
        let a = g.add(a, h);
        let h = self.norm_b2.rows(g, ps, b);
        let h = self.mlp_b.forward(g, ps, h);
        (a, g.add(b, h))
    }
}

/// Bidirectional cross-attention fusion of two co-shaped grids into one
/// unit-norm embedding.
#[derive(Clone, Debug)]
pub struct Cct {
    pub pos: ParamId,
    pub blocks: Vec<CctBlock>,
    pub proj: Linear,
    pub heads: usize,
}

/// Centred, unit-range coordinates of every grid cell, `[S, 3]`.
pub fn grid_coordinates<F: Float>(dims: [usize; 3]) -> Tensor<F> {
    let s: usize = dims.iter().product();
    let mut t = Tensor::zeros([s, 3]);
    for i in 0..s {
        let p = [i / (dims[1] * dims[2]), i / dims[2] % dims[1], i % dims[2]];
        for a in 0..3 {
            t.data_mut()[i * 3 + a] = F::from_f64_lossy((p[a] as f64 + 0.5) / dims[a] as f64 - 0.5);
        }
    }
    t
}

impl Cct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(ps: &mut ParamSet<F>, component: &str, dim: usize, embed: usize, blocks: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let pos = ps.insert("cct.pos", component, init_tensor(&[3, dim], Init::Normal(0.5), rng))?;
        let blocks = (0..blocks)
            .map(|i| CctBlock::new(ps, &format!("cct.block{i}"), component, dim, rng))
            .collect::<Result<_>>()?;
        let proj = Linear::new(ps, "cct.proj", component, 2 * dim, embed, Init::Scaled(2 * dim), rng)?;
        Ok(Self { pos, blocks, proj, heads })
    }

    /// `a` and `b` are `[C, S]` grids over `dims`. Returns the unit-norm
    /// `[1, E]` fusion and the attention nodes (two per block).
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, a: Var, b: Var, dims: [usize; 3]) -> (Var, Vec<Var>) {
        self.forward_at(g, ps, a, b, grid_coordinates(dims))
    }

    /// [`Cct::forward`] with explicit `[S, 3]` token coordinates.
    pub fn forward_at<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, a: Var, b: Var, coords: Tensor<F>) -> (Var, Vec<Var>) {
        let s = coords.dims2().0;
        let coords = g.constant(coords);
        let pos = g.param(ps, self.pos);
        let pe = g.matmul(coords, pos);
        let at = g.transpose(a);
        let bt = g.transpose(b);
        let mut ta = g.add(at, pe);
        let mut tb = g.add(bt, pe);
        let all: Vec<usize> = (0..s).collect();
        let layout = Arc::new(AttentionLayout {
            groups: vec![AttentionGroup {
                queries: all.clone(),
                keys: all,
                mask: None,
            }],
        });
        let mut maps = Vec::new();
        for blk in &self.blocks {
            (ta, tb) = blk.forward(g, ps, ta, tb, &layout, self.heads, &mut maps);
        }
        let avg = g.constant(Tensor::full([1, s], F::one() / F::from_usize(s).unwrap()));
        let pa = g.matmul(avg, ta);
        let pb = g.matmul(avg, tb);
        let cat = g.concat_cols(&[pa, pb]);
        let y = self.proj.forward(g, ps, cat);
        (g.l2_normalize_rows(y), maps)
    }
}
