//! Fine-tuning objectives: per-class BCE, KL alignment between text and
//! fused features, and the exponential ramp weights that combine them.

use serde::{Deserialize, Serialize};
use volalign_autodiff::{Float, Graph, Var};

use crate::{Error, Result};

/// Probability clamp for BCE.
pub const BCE_EPS: f64 = 1e-7;

/// Mean over classes of the binary cross-entropy.
pub fn bce_loss(probabilities: &[f64], labels: &[f64]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::Shape(format!("{} probabilities vs {} labels", probabilities.len(), labels.len())));
    }
    if probabilities.is_empty() {
        return Err(Error::Empty("probabilities"));
    }
    if probabilities.iter().chain(labels).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("bce input"));
    }
    let sum: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / probabilities.len() as f64)
}

/// Which side of the divergence is the fixed text distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// `KL(text || fusion)`
    #[default]
    Forward,
    /// `KL(fusion || text)`
    Reverse,
}

pub fn log_softmax(v: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = v.iter().map(|x| x / temperature).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

pub fn softmax(v: &[f64], temperature: f64) -> Vec<f64> {
    log_softmax(v, temperature).into_iter().map(f64::exp).collect()
}

fn check_kl(f_t: &[f64], f_fusion: &[f64], temperature: f64) -> Result<()> {
    if f_t.len() != f_fusion.len() {
        return Err(Error::Shape(format!("text dim {} vs fusion dim {}", f_t.len(), f_fusion.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::Temperature(temperature));
    }
    if f_t.iter().chain(f_fusion).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kl input"));
    }
    Ok(())
}

/// Divergence between `softmax(f_t / T)` and `softmax(f_fusion / T)`.
pub fn kl_alignment(f_t: &[f64], f_fusion: &[f64], temperature: f64, direction: KlDirection) -> Result<f64> {
    check_kl(f_t, f_fusion, temperature)?;
    let lp = log_softmax(f_t, temperature);
    let lq = log_softmax(f_fusion, temperature);
    let (a, b) = match direction {
        KlDirection::Forward => (&lp, &lq),
        KlDirection::Reverse => (&lq, &lp),
    };
    let kl: f64 = a.iter().zip(b).map(|(&la, &lb)| la.exp() * (la - lb)).sum();
    // near-identical distributions can round a hair below zero
    Ok(kl.max(0.0))
}

/// Graph form of [`kl_alignment`]; `fusion` is a `[1, E]` node and the text
/// distribution is a constant.
pub fn kl_alignment_graph<F: Float>(g: &mut Graph<F>, f_t: &[f64], fusion: Var, temperature: f64, direction: KlDirection) -> Result<Var> {
    let fv: Vec<f64> = g.value(fusion).data().iter().map(|v| v.to_f64_lossy()).collect();
    check_kl(f_t, &fv, temperature)?;
    let target: Vec<F> = softmax(f_t, temperature).into_iter().map(F::from_f64_lossy).collect();
    let z = g.scale(fusion, F::from_f64_lossy(1.0 / temperature));
    Ok(match direction {
        KlDirection::Forward => g.kl_to_target(z, target),
        KlDirection::Reverse => g.kl_from_target(z, target),
    })
}

/// Epoch position and shape of the two loss-weight ramps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub t: usize,
    pub t_max: usize,
    pub base: f64,
    pub decay: f64,
}

impl ScheduleState {
    pub fn new(t: usize, t_max: usize) -> Result<Self> {
        if t_max == 0 || t > t_max {
            return Err(Error::Schedule { t, t_max });
        }
        Ok(Self { t, t_max, base: 0.1, decay: 5.0 })
    }

    fn progress(&self) -> f64 {
        self.t as f64 / self.t_max as f64
    }
}

/// Classification weight, rising from `base * e^-decay` to `base`.
pub fn lambda_c(s: &ScheduleState) -> f64 {
    s.base * (-s.decay * (1.0 - s.progress())).exp()
}

/// Alignment weight, falling from `base` to `base * e^-decay`.
pub fn lambda_s(s: &ScheduleState) -> f64 {
    s.base * (-s.decay * s.progress()).exp()
}

pub fn total_loss(cls: f64, kl: f64, s: &ScheduleState) -> f64 {
    lambda_c(s) * cls + lambda_s(s) * kl
}
