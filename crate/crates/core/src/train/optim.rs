use serde::{Deserialize, Serialize};
use volalign_autodiff::{Gradients, ParamSet};

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Summed parameter gradients of one mini-batch, indexed by parameter id.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    pub grads: Vec<Vec<f32>>,
}

impl GradBuffer {
    pub fn new(ps: &ParamSet<f32>) -> Self {
        Self {
            grads: ps.entries().map(|(_, e)| vec![0.0; e.tensor.len()]).collect(),
        }
    }

    pub fn add(&mut self, g: &Gradients<f32>) {
        for (id, t) in g.params() {
            for (a, b) in self.grads[id.index()].iter_mut().zip(t.data()) {
                *a += b;
            }
        }
    }

    pub fn clear(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl AdamW {
    pub fn new(ps: &ParamSet<f32>, lr: f64, cfg: AdamWConfig) -> Self {
        let zeros = || ps.entries().map(|(_, e)| vec![0.0; e.tensor.len()]).collect();
        Self {
            cfg,
            lr,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update of every trainable parameter; frozen ones are skipped.
    pub fn step(&mut self, ps: &mut ParamSet<f32>, grads: &GradBuffer) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let ids: Vec<_> = ps.entries().map(|(id, _)| id).collect();
        for id in ids {
            if ps.is_frozen(id) {
                continue;
            }
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = ps.tensor_mut(id).data_mut();
            for (k, w) in p.iter_mut().enumerate() {
                let g = grads.grads[i][k] as f64;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                let x = *w as f64;
                *w = (x - self.lr * c.weight_decay * x - self.lr * update) as f32;
            }
        }
    }
}
