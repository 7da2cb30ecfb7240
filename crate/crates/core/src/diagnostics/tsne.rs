use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const MAX_POINTS: usize = 5000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// `None` picks `max(N / early_exaggeration / 4, 50)`; a fixed 200
    /// oscillates and flings points apart on a few dozen inputs
    pub learning_rate: Option<f64>,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: None,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneResult {
    pub points: Vec<[f64; 2]>,
    /// `(iteration, KL(P || Q))` against the unexaggerated affinities
    pub kl_history: Vec<(usize, f64)>,
    /// KL after the last exaggerated iteration
    pub kl_after_exaggeration: f64,
    pub final_kl: f64,
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row-conditional affinities whose entropy matches `ln(perplexity)`.
fn conditional_p(d: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &d[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0f64, f64::NEG_INFINITY, f64::INFINITY);
        let min = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::INFINITY, f64::min);
        for _ in 0..200 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let w = (-(row[j] - min) * beta).exp();
                p[i * n + j] = w;
                sum += w;
                weighted += (row[j] - min) * w;
            }
            let entropy = sum.ln() + beta * weighted / sum;
            for j in 0..n {
                p[i * n + j] /= sum;
            }
            let diff = entropy - target;
            if diff.abs() < 1e-10 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
    }
    p
}

fn kl(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                num[i * n + j] = 1.0 / (1.0 + d);
                z += num[i * n + j];
            }
        }
    }
    (0..n * n)
        .filter(|&k| p[k] > 0.0)
        .map(|k| p[k] * (p[k] / (num[k] / z).max(1e-300)).ln())
        .sum()
}

/// Exact O(N^2) t-SNE to two dimensions.
pub fn tsne_embed(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = x.len();
    if n == 0 {
        return Err(Error::Empty("t-SNE input"));
    }
    if n > MAX_POINTS {
        return Err(Error::Config(format!("exact t-SNE is limited to {MAX_POINTS} points, got {n}")));
    }
    if !(cfg.perplexity > 0.0) || 3.0 * cfg.perplexity >= n as f64 {
        return Err(Error::Perplexity {
            perplexity: cfg.perplexity,
            n,
        });
    }
    if cfg.learning_rate.is_some_and(|lr| !(lr > 0.0)) {
        return Err(Error::Config("t-SNE learning_rate must be positive".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-SNE input"));
    }
    let cond = conditional_p(&squared_distances(x), n, cfg.perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }
    let lr = cfg.learning_rate.unwrap_or((n as f64 / cfg.early_exaggeration / 4.0).max(50.0));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-2).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut kl_history = Vec::new();
    let mut kl_after_exaggeration = f64::NAN;
    for it in 0..cfg.iterations {
        let exaggerate = it < cfg.exaggeration_iterations;
        let ex = if exaggerate { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iterations { cfg.initial_momentum } else { cfg.final_momentum };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                    num[i * n + j] = 1.0 / (1.0 + d);
                    z += num[i * n + j];
                }
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in (0..n).filter(|&j| j != i) {
                let k = i * n + j;
                let m = (ex * p[k] - num[k] / z) * num[k];
                grad[0] += 4.0 * m * (y[i][0] - y[j][0]);
                grad[1] += 4.0 * m * (y[i][1] - y[j][1]);
            }
            for a in 0..2 {
                gains[i][a] = if (grad[a] > 0.0) != (update[i][a] > 0.0) {
                    gains[i][a] + 0.2
                } else {
                    (gains[i][a] * 0.8f64).max(0.01)
                };
                update[i][a] = momentum * update[i][a] - lr * gains[i][a] * grad[a];
            }
        }
        for i in 0..n {
            y[i][0] += update[i][0];
            y[i][1] += update[i][1];
        }
        let mean = y.iter().fold([0.0; 2], |m, p| [m[0] + p[0], m[1] + p[1]]).map(|v| v / n as f64);
        y.iter_mut().for_each(|p| {
            p[0] -= mean[0];
            p[1] -= mean[1];
        });
        let last_exaggerated = it + 1 == cfg.exaggeration_iterations;
        if last_exaggerated || (it + 1) % 50 == 0 || it + 1 == cfg.iterations {
            let v = kl(&p, &y);
            kl_history.push((it + 1, v));
            if last_exaggerated {
                kl_after_exaggeration = v;
            }
        }
    }
    let final_kl = kl_history.last().map_or(f64::NAN, |h| h.1);
    Ok(TsneResult {
        points: y,
        kl_history,
        kl_after_exaggeration,
        final_kl,
    })
}
