use volalign_autodiff::{Float, Graph, Var};

use crate::{Error, Result};

/// Scaled cosine similarities between a vision batch (rows) and a text
/// batch (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    /// row-major `n x n`
    pub data: Vec<f64>,
    pub temperature: f64,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn transposed(&self) -> Self {
        let n = self.n;
        Self {
            n,
            data: (0..n * n).map(|k| self.data[(k % n) * n + k / n]).collect(),
            temperature: self.temperature,
        }
    }
}

/// `S[i][j] = <fv_i, ft_j> / temperature`. Rows are expected unit-norm.
pub fn similarity_matrix(fv: &[Vec<f64>], ft: &[Vec<f64>], temperature: f64) -> Result<SimilarityMatrix> {
    if fv.len() != ft.len() {
        return Err(Error::BatchMismatch(fv.len(), ft.len()));
    }
    if fv.is_empty() {
        return Err(Error::Empty("contrastive batch"));
    }
    if !(temperature > 0.0) {
        return Err(Error::Temperature(temperature));
    }
    let n = fv.len();
    let mut data = Vec::with_capacity(n * n);
    for a in fv {
        for b in ft {
            if a.len() != b.len() {
                return Err(Error::Shape(format!("embedding dims {} and {}", a.len(), b.len())));
            }
            data.push(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / temperature);
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity matrix"));
    }
    Ok(SimilarityMatrix { n, data, temperature })
}

/// Mean over rows of `-log softmax(S[i])[i]`.
pub fn loss_v2t(s: &SimilarityMatrix) -> f64 {
    let n = s.n;
    let mut total = 0.0;
    for i in 0..n {
        let row = &s.data[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[i];
    }
    total / n as f64
}

/// Same over columns.
pub fn loss_t2v(s: &SimilarityMatrix) -> f64 {
    loss_v2t(&s.transposed())
}

pub fn symmetric_loss(fv: &[Vec<f64>], ft: &[Vec<f64>], temperature: f64) -> Result<f64> {
    let s = similarity_matrix(fv, ft, temperature)?;
    Ok((loss_v2t(&s) + loss_t2v(&s)) / 2.0)
}

/// Graph form over `[N, E]` batches.
pub fn symmetric_loss_graph<F: Float>(g: &mut Graph<F>, fv: Var, ft: Var, temperature: f64) -> Var {
    let n = g.value(fv).dims2().0;
    let s = g.matmul_t(fv, false, ft, true);
    let s = g.scale(s, F::from_f64_lossy(1.0 / temperature));
    let v2t = g.cross_entropy(s, (0..n).collect());
    let st = g.transpose(s);
    let t2v = g.cross_entropy(st, (0..n).collect());
    let sum = g.add(v2t, t2v);
    g.scale(sum, F::from_f64_lossy(0.5))
}
