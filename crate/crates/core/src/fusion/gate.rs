use rand::Rng;
use volalign_autodiff::{Float, Graph, ParamSet, Var};

use crate::nn::{Init, Linear};
use crate::vision::FeatureGrid;
use crate::{Error, Result};

/// Channel gate `1 + tanh(W p + b)` from the projected report; zero
/// initialised so it starts as the identity.
#[derive(Clone, Debug)]
pub struct Gate {
    pub linear: Linear,
}

impl Gate {
    pub fn new<F: Float>(ps: &mut ParamSet<F>, component: &str, embed: usize, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(ps, "gate", component, embed, channels, Init::Zeros, rng)?,
        })
    }

    /// `text` is `[1, E]`; returns the `[C]` gate.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, text: Var) -> Var {
        let z = self.linear.forward(g, ps, text);
        let t = g.tanh(z);
        let gate = g.offset(t, F::one());
        g.reshape(gate, [self.linear.d_out])
    }
}

/// `f_vt[c, s] = f_trans[c, s] * gate[c]` on the graph.
pub fn modulate<F: Float>(g: &mut Graph<F>, f_trans: Var, gate: Var) -> Var {
    g.mul_col(f_trans, gate)
}

/// Plain form of [`modulate`] on a materialised grid.
pub fn text_modulate(f_trans: &FeatureGrid, gate: &[f32]) -> Result<FeatureGrid> {
    if gate.len() != f_trans.channels {
        return Err(Error::Shape(format!("gate of {} for {} channels", gate.len(), f_trans.channels)));
    }
    let s = f_trans.data.len() / f_trans.channels.max(1);
    let mut out = f_trans.clone();
    for (c, &w) in gate.iter().enumerate() {
        out.data[c * s..(c + 1) * s].iter_mut().for_each(|v| *v *= w);
    }
    Ok(out)
}
