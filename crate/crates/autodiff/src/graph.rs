use std::sync::Arc;

use crate::gemm::{gemm, MatRef};
use crate::{Float, ParamId, ParamSet, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Smooth pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    /// tanh approximation
    Gelu,
    Tanh,
    Sigmoid,
}

/// One attention group: every listed query row attends over the listed
/// key rows. `mask[q * keys.len() + k] == false` blocks a pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
    pub mask: Option<Vec<bool>>,
}

/// Partition of query rows into attention groups (windows, or one group
/// for global cross-attention). Each query row must appear in at most one
/// group.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub groups: Vec<AttentionGroup>,
}

#[derive(Clone, Copy, Debug)]
enum NormAxis {
    /// normalise each row of `[n, d]`
    Rows,
    /// normalise each column of `[c, s]` across its `c` entries
    Cols,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    dims: [usize; 3],
    cout: usize,
    out_dims: [usize; 3],
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, v: Var },
    MulRow { x: Var, v: Var },
    AddCol { x: Var, v: Var },
    MulCol { x: Var, v: Var },
    Scale(Var, F),
    Offset(Var),
    Unary { x: Var, kind: Unary },
    Transpose(Var),
    Reshape(Var),
    GatherRows { x: Var, index: Vec<usize> },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Norm { x: Var, gamma: Var, beta: Var, axis: NormAxis, xhat: Vec<F>, rstd: Vec<F> },
    L2Rows { x: Var, norms: Vec<F> },
    Attention { q: Var, k: Var, v: Var, layout: Arc<AttentionLayout>, heads: usize, probs: Vec<Vec<F>> },
    Conv3d { x: Var, w: Var, geom: ConvGeom, cols: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
    Bce { p: Var, labels: Vec<F>, eps: F },
    KlTarget { z: Var, target: Vec<F>, q: Vec<F> },
    KlFromTarget { z: Var, excess: Vec<F>, q: Vec<F>, kl: F },
    Sum(Var),
    Mean(Var),
    Dot { x: Var, weights: Vec<F> },
    Pick { x: Var, index: usize },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Tape of one forward computation.
pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
    bound: Vec<(ParamId, Var)>,
    track: bool,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn gelu_parts<F: Float>(x: F) -> (F, F) {
    let c = F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64_lossy(0.044715);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x);
    (y, dy)
}

fn log_softmax_row<F: Float>(row: &[F], out: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = row.iter().map(|v| (*v - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = *v - lse;
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: Vec::new(),
            track: true,
        }
    }

    /// A graph that never records backward caches; [`Graph::backward`]
    /// returns empty gradients.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> F {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "node is not a scalar");
        t.data()[0]
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Constant leaf that still receives a gradient (useful for inspecting
    /// sensitivities of inputs).
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a parameter into the graph. Binding the same id twice returns
    /// the same node.
    pub fn param(&mut self, params: &ParamSet<F>, id: ParamId) -> Var {
        if let Some((_, v)) = self.bound.iter().find(|(p, _)| *p == id) {
            return *v;
        }
        let v = self.push(params.tensor(id).clone(), Op::Leaf, true);
        self.bound.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes a stored matrix.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (ar, ac) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        let ma = MatRef::new(self.value(a).data(), ar, ac);
        let mb = MatRef::new(self.value(b).data(), br, bc);
        let ma = if ta { ma.t() } else { ma };
        let mb = if tb { mb.t() } else { mb };
        let m = if ta { ac } else { ar };
        let n = if tb { br } else { bc };
        let mut out = vec![F::zero(); m * n];
        gemm(ma, mb, F::zero(), &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new([m, n], out).unwrap(), Op::MatMul { a, b, ta, tb }, ng)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "elementwise operands differ in size");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    fn broadcast(&mut self, x: Var, v: Var, along_rows: bool, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (n, d) = self.value(x).dims2();
        let vv = self.value(v).data();
        let expect = if along_rows { d } else { n };
        assert_eq!(vv.len(), expect, "broadcast operand length");
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                let b = if along_rows { vv[j] } else { vv[i] };
                out.push(f(xv[i * d + j], b));
            }
        }
        Tensor::new(self.value(x).shape().to_vec(), out).unwrap()
    }

    /// `x[i, j] + v[j]`
    pub fn add_row(&mut self, x: Var, v: Var) -> Var {
        let t = self.broadcast(x, v, true, |a, b| a + b);
        let ng = self.ng(x) || self.ng(v);
        self.push(t, Op::AddRow { x, v }, ng)
    }

    /// `x[i, j] * v[j]`
    pub fn mul_row(&mut self, x: Var, v: Var) -> Var {
        let t = self.broadcast(x, v, true, |a, b| a * b);
        let ng = self.ng(x) || self.ng(v);
        self.push(t, Op::MulRow { x, v }, ng)
    }

    /// `x[i, j] + v[i]`
    pub fn add_col(&mut self, x: Var, v: Var) -> Var {
        let t = self.broadcast(x, v, false, |a, b| a + b);
        let ng = self.ng(x) || self.ng(v);
        self.push(t, Op::AddCol { x, v }, ng)
    }

    /// `x[i, j] * v[i]`
    pub fn mul_col(&mut self, x: Var, v: Var) -> Var {
        let t = self.broadcast(x, v, false, |a, b| a * b);
        let ng = self.ng(x) || self.ng(v);
        self.push(t, Op::MulCol { x, v }, ng)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let src = self.value(x);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| *v * c).collect()).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    pub fn offset(&mut self, x: Var, c: F) -> Var {
        let src = self.value(x);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| *v + c).collect()).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::Offset(x), ng)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| match kind {
                Unary::Silu => v * sigmoid(v),
                Unary::Gelu => gelu_parts(v).0,
                Unary::Tanh => v.tanh(),
                Unary::Sigmoid => sigmoid(v),
            })
            .collect();
        let t = Tensor::new(src.shape().to_vec(), data).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::Unary { x, kind }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (n, d) = self.value(x).dims2();
        let src = self.value(x).data();
        let mut out = vec![F::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                out[j * n + i] = src[i * d + j];
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new([d, n], out).unwrap(), Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let t = self.value(x).clone().reshaped(shape).expect("reshape preserves size");
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// `out[i] = x[index[i]]` over rows of a matrix.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let (n, d) = self.value(x).dims2();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &r in &index {
            assert!(r < n, "gather index {r} out of {n} rows");
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let ng = self.ng(x);
        let t = Tensor::new([index.len(), d], out).unwrap();
        self.push(t, Op::GatherRows { x, index }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = self.value(*p).dims2();
                assert_eq!(r, n, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::new([n, total], out).unwrap(), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Stack equally sized vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        let d = self.value(rows[0]).len();
        let mut out = Vec::with_capacity(rows.len() * d);
        for r in rows {
            assert_eq!(self.value(*r).len(), d, "stack_rows length mismatch");
            out.extend_from_slice(self.value(*r).data());
        }
        let ng = rows.iter().any(|r| self.ng(*r));
        self.push(Tensor::new([rows.len(), d], out).unwrap(), Op::StackRows(rows.to_vec()), ng)
    }

    /// Layer normalisation of each row of `[n, d]` with affine `gamma, beta` of length `d`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        self.norm(x, gamma, beta, NormAxis::Rows, eps)
    }

    /// Normalisation across channels at every position of a `[c, s]` grid.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        self.norm(x, gamma, beta, NormAxis::Cols, eps)
    }

    fn norm(&mut self, x: Var, gamma: Var, beta: Var, axis: NormAxis, eps: F) -> Var {
        let (n, d) = self.value(x).dims2();
        let (groups, len, gs, es) = match axis {
            NormAxis::Rows => (n, d, d, 1),
            NormAxis::Cols => (d, n, 1, d),
        };
        assert_eq!(self.value(gamma).len(), len, "norm gamma length");
        assert_eq!(self.value(beta).len(), len, "norm beta length");
        let src = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let lf = F::from_usize(len).unwrap();
        let mut out = vec![F::zero(); n * d];
        let mut xhat = vec![F::zero(); n * d];
        let mut rstd = vec![F::zero(); groups];
        for g in 0..groups {
            let mean = (0..len).map(|e| src[g * gs + e * es]).sum::<F>() / lf;
            let var = (0..len)
                .map(|e| {
                    let c = src[g * gs + e * es] - mean;
                    c * c
                })
                .sum::<F>()
                / lf;
            let r = F::one() / (var + eps).sqrt();
            rstd[g] = r;
            for e in 0..len {
                let i = g * gs + e * es;
                let h = (src[i] - mean) * r;
                xhat[i] = h;
                out[i] = h * gv[e] + bv[e];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let t = Tensor::new(self.value(x).shape().to_vec(), out).unwrap();
        let (xhat, rstd) = if ng && self.track { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(t, Op::Norm { x, gamma, beta, axis, xhat, rstd }, ng)
    }

    /// Divide each row by its Euclidean norm. Callers must rule out zero rows.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.value(x).dims2();
        let src = self.value(x).data();
        let mut out = vec![F::zero(); n * d];
        let mut norms = vec![F::zero(); n];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let nrm = row.iter().map(|v| *v * *v).sum::<F>().sqrt();
            norms[i] = nrm;
            for j in 0..d {
                out[i * d + j] = row[j] / nrm;
            }
        }
        let ng = self.ng(x);
        let t = Tensor::new(self.value(x).shape().to_vec(), out).unwrap();
        self.push(t, Op::L2Rows { x, norms }, ng)
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q` is `[nq, d]`, `k` and `v` are `[nk, d]`; the output is `[nq, d]`
    /// with row `r` produced by the group that lists `r` as a query.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttentionLayout>, heads: usize) -> Var {
        let (nq, d) = self.value(q).dims2();
        let (nk, dk) = self.value(k).dims2();
        assert_eq!(d, dk, "query/key width");
        assert_eq!(self.value(v).dims2(), (nk, d), "value shape");
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![F::zero(); nq * d];
        let mut probs = Vec::with_capacity(layout.groups.len() * heads);
        for grp in &layout.groups {
            let (gq, gk) = (grp.queries.len(), grp.keys.len());
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = vec![F::zero(); gq * gk];
                for (qi, &qr) in grp.queries.iter().enumerate() {
                    let row = &mut p[qi * gk..(qi + 1) * gk];
                    let mut max = F::neg_infinity();
                    for (kj, &kr) in grp.keys.iter().enumerate() {
                        let allowed = grp.mask.as_ref().map_or(true, |m| m[qi * gk + kj]);
                        row[kj] = if allowed {
                            let s = (0..dh).map(|c| qv[qr * d + c0 + c] * kv[kr * d + c0 + c]).sum::<F>() * scale;
                            max = max.max(s);
                            s
                        } else {
                            F::neg_infinity()
                        };
                    }
                    let mut sum = F::zero();
                    for s in row.iter_mut() {
                        *s = if s.is_finite() { (*s - max).exp() } else { F::zero() };
                        sum += *s;
                    }
                    for s in row.iter_mut() {
                        *s /= sum;
                    }
                    for (kj, &kr) in grp.keys.iter().enumerate() {
                        let w = row[kj];
                        if w == F::zero() {
                            continue;
                        }
                        for c in 0..dh {
                            out[qr * d + c0 + c] += w * vv[kr * d + c0 + c];
                        }
                    }
                }
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(Tensor::new([nq, d], out).unwrap(), Op::Attention { q, k, v, layout, heads, probs }, ng)
    }

    /// Attention probability maps of an attention node, one per
    /// (group, head) in group-major order, each `[queries, keys]` row-major.
    pub fn attention_maps(&self, v: Var) -> Option<(&AttentionLayout, usize, &[Vec<F>])> {
        match &self.nodes[v.0].op {
            Op::Attention { layout, heads, probs, .. } => Some((layout.as_ref(), *heads, probs.as_slice())),
            _ => None,
        }
    }

    /// 3D convolution of `x` (`cin` channels over `dims`) with weights
    /// `[cout, cin * kernel^3]`; zero padding. Output is `[cout, d'*h'*w']`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv3d(&mut self, x: Var, w: Var, cin: usize, dims: [usize; 3], kernel: usize, stride: usize, pad: usize) -> Var {
        assert_eq!(self.value(x).len(), cin * dims.iter().product::<usize>(), "conv input size");
        let out_dims = dims.map(|n| (n + 2 * pad - kernel) / stride + 1);
        let (cout, wk) = self.value(w).dims2();
        let geom = ConvGeom { cin, dims, cout, out_dims, kernel, stride, pad };
        assert_eq!(wk, geom.col_rows(), "conv weight width");
        let cols = im2col(self.value(x).data(), &geom);
        let so = geom.out_len();
        let mut out = vec![F::zero(); cout * so];
        gemm(MatRef::new(self.value(w).data(), cout, wk), MatRef::new(&cols, wk, so), F::zero(), &mut out);
        let ng = self.ng(x) || self.ng(w);
        let cols = if ng && self.track { cols } else { Vec::new() };
        self.push(Tensor::new([cout, so], out).unwrap(), Op::Conv3d { x, w, geom, cols }, ng)
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let (n, c) = self.value(logits).dims2();
        assert_eq!(targets.len(), n, "one target per row");
        let src = self.value(logits).data();
        let mut lsm = vec![F::zero(); n * c];
        let mut loss = F::zero();
        for i in 0..n {
            log_softmax_row(&src[i * c..(i + 1) * c], &mut lsm[i * c..(i + 1) * c]);
            loss -= lsm[i * c + targets[i]];
        }
        loss /= F::from_usize(n).unwrap();
        let probs = lsm.iter().map(|v| v.exp()).collect();
        let ng = self.ng(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, probs }, ng)
    }

    /// Mean binary cross-entropy of probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, labels: Vec<F>, eps: F) -> Var {
        let pv = self.value(p).data();
        assert_eq!(pv.len(), labels.len(), "one label per probability");
        let loss = pv
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                let p = p.max(eps).min(F::one() - eps);
                -(y * p.ln() + (F::one() - y) * (F::one() - p).ln())
            })
            .sum::<F>()
            / F::from_usize(labels.len()).unwrap();
        let ng = self.ng(p);
        self.push(Tensor::scalar(loss), Op::Bce { p, labels, eps }, ng)
    }

    /// `KL(target || softmax(z))` with the target distribution held constant.
    pub fn kl_to_target(&mut self, z: Var, target: Vec<F>) -> Var {
        let zv = self.value(z).data();
        assert_eq!(zv.len(), target.len(), "kl operand lengths");
        let mut lq = vec![F::zero(); zv.len()];
        log_softmax_row(zv, &mut lq);
        let loss = target
            .iter()
            .zip(&lq)
            .filter(|(p, _)| **p > F::zero())
            .map(|(&p, &l)| p * (p.ln() - l))
            .sum::<F>();
        let q = lq.iter().map(|v| v.exp()).collect();
        let ng = self.ng(z);
        self.push(Tensor::scalar(loss), Op::KlTarget { z, target, q }, ng)
    }

    /// `KL(softmax(z) || target)` with the target distribution held
    /// constant; the target must be strictly positive.
    pub fn kl_from_target(&mut self, z: Var, target: Vec<F>) -> Var {
        let zv = self.value(z).data();
        assert_eq!(zv.len(), target.len(), "kl operand lengths");
        let mut lq = vec![F::zero(); zv.len()];
        log_softmax_row(zv, &mut lq);
        let excess: Vec<F> = lq.iter().zip(&target).map(|(&l, &p)| l - p.ln()).collect();
        let q: Vec<F> = lq.iter().map(|v| v.exp()).collect();
        let kl = q.iter().zip(&excess).map(|(&a, &b)| a * b).sum::<F>();
        let ng = self.ng(z);
        self.push(Tensor::scalar(kl), Op::KlFromTarget { z, excess, q, kl }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<F>() / F::from_usize(t.len()).unwrap();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// `sum_i weights[i] * x[i]` with constant weights.
    pub fn dot_const(&mut self, x: Var, weights: Vec<F>) -> Var {
        let xv = self.value(x).data();
        assert_eq!(xv.len(), weights.len(), "dot_const lengths");
        let s = xv.iter().zip(&weights).map(|(a, b)| *a * *b).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Dot { x, weights }, ng)
    }

    pub fn pick(&mut self, x: Var, index: usize) -> Var {
        let s = self.value(x).data()[index];
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Pick { x, index }, ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, output: Var) -> Gradients<F> {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[output.0].needs_grad {
            grads[output.0] = Some(Tensor::full(self.value(output).shape().to_vec(), F::one()));
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            bound: self.bound.clone(),
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, t: Tensor<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn like(&self, v: Var, data: Vec<F>) -> Tensor<F> {
        Tensor::new(self.value(v).shape().to_vec(), data).unwrap()
    }

    fn backprop(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.value(*a).dims2();
                let (br, bc) = self.value(*b).dims2();
                let ma = MatRef::new(self.value(*a).data(), ar, ac);
                let mb = MatRef::new(self.value(*b).data(), br, bc);
                let opa = if *ta { ma.t() } else { ma };
                let opb = if *tb { mb.t() } else { mb };
                let (m, n) = node.value.dims2();
                let dc = MatRef::new(gd, m, n);
                if self.ng(*a) {
                    let mut da = vec![F::zero(); ar * ac];
                    if *ta {
                        gemm(opb, dc.t(), F::zero(), &mut da);
                    } else {
                        gemm(dc, opb.t(), F::zero(), &mut da);
                    }
                    self.acc(grads, *a, self.like(*a, da));
                }
                if self.ng(*b) {
                    let mut db = vec![F::zero(); br * bc];
                    if *tb {
                        gemm(dc.t(), opa, F::zero(), &mut db);
                    } else {
                        gemm(opa.t(), dc, F::zero(), &mut db);
                    }
                    self.acc(grads, *b, self.like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, self.like(*a, gd.to_vec()));
                self.acc(grads, *b, self.like(*b, gd.to_vec()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    self.acc(grads, *a, self.like(*a, gd.iter().zip(bv).map(|(g, y)| *g * *y).collect()));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.like(*b, gd.iter().zip(av).map(|(g, x)| *g * *x).collect()));
                }
            }
            Op::AddRow { x, v } | Op::AddCol { x, v } => {
                let rows = matches!(node.op, Op::AddRow { .. });
                let (n, d) = node.value.dims2();
                self.acc(grads, *x, self.like(*x, gd.to_vec()));
                if self.ng(*v) {
                    let mut dv = vec![F::zero(); if rows { d } else { n }];
                    for r in 0..n {
                        for c in 0..d {
                            dv[if rows { c } else { r }] += gd[r * d + c];
                        }
                    }
                    self.acc(grads, *v, self.like(*v, dv));
                }
            }
            Op::MulRow { x, v } | Op::MulCol { x, v } => {
                let rows = matches!(node.op, Op::MulRow { .. });
                let (n, d) = node.value.dims2();
                let (xv, vv) = (self.value(*x).data(), self.value(*v).data());
                if self.ng(*x) {
                    let mut dx = vec![F::zero(); n * d];
                    for r in 0..n {
                        for c in 0..d {
                            dx[r * d + c] = gd[r * d + c] * vv[if rows { c } else { r }];
                        }
                    }
                    self.acc(grads, *x, self.like(*x, dx));
                }
                if self.ng(*v) {
                    let mut dv = vec![F::zero(); vv.len()];
                    for r in 0..n {
                        for c in 0..d {
                            dv[if rows { c } else { r }] += gd[r * d + c] * xv[r * d + c];
                        }
                    }
                    self.acc(grads, *v, self.like(*v, dv));
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, self.like(*x, gd.iter().map(|v| *v * *c).collect())),
            Op::Offset(x) | Op::Reshape(x) => self.acc(grads, *x, self.like(*x, gd.to_vec())),
            Op::Unary { x, kind } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let dx = gd
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&g, (&xx, &y))| {
                        g * match kind {
                            Unary::Silu => {
                                let s = sigmoid(xx);
                                s * (F::one() + xx * (F::one() - s))
                            }
                            Unary::Gelu => gelu_parts(xx).1,
                            Unary::Tanh => F::one() - y * y,
                            Unary::Sigmoid => y * (F::one() - y),
                        }
                    })
                    .collect();
                self.acc(grads, *x, self.like(*x, dx));
            }
            Op::Transpose(x) => {
                let (n, d) = self.value(*x).dims2();
                let mut dx = vec![F::zero(); n * d];
                for r in 0..n {
                    for c in 0..d {
                        dx[r * d + c] = gd[c * n + r];
                    }
                }
                self.acc(grads, *x, self.like(*x, dx));
            }
            Op::GatherRows { x, index } => {
                let (n, d) = self.value(*x).dims2();
                let mut dx = vec![F::zero(); n * d];
                for (o, &r) in index.iter().enumerate() {
                    for c in 0..d {
                        dx[r * d + c] += gd[o * d + c];
                    }
                }
                self.acc(grads, *x, self.like(*x, dx));
            }
            Op::ConcatCols(parts) => {
                let (n, total) = node.value.dims2();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).dims2().1;
                    if self.ng(*p) {
                        let mut dp = Vec::with_capacity(n * w);
                        for r in 0..n {
                            dp.extend_from_slice(&gd[r * total + off..r * total + off + w]);
                        }
                        self.acc(grads, *p, self.like(*p, dp));
                    }
                    off += w;
                }
            }
            Op::StackRows(rows) => {
                let d = node.value.dims2().1;
                for (r, v) in rows.iter().enumerate() {
                    self.acc(grads, *v, self.like(*v, gd[r * d..(r + 1) * d].to_vec()));
                }
            }
            Op::Norm { x, gamma, beta, axis, xhat, rstd } => {
                let (n, d) = node.value.dims2();
                let (groups, len, gs, es) = match axis {
                    NormAxis::Rows => (n, d, d, 1),
                    NormAxis::Cols => (d, n, 1, d),
                };
                let gv = self.value(*gamma).data();
                let lf = F::from_usize(len).unwrap();
                let mut dgamma = vec![F::zero(); len];
                let mut dbeta = vec![F::zero(); len];
                let mut dx = vec![F::zero(); n * d];
                for grp in 0..groups {
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for e in 0..len {
                        let idx = grp * gs + e * es;
                        dgamma[e] += gd[idx] * xhat[idx];
                        dbeta[e] += gd[idx];
                        let dh = gd[idx] * gv[e];
                        s1 += dh;
                        s2 += dh * xhat[idx];
                    }
                    for e in 0..len {
                        let idx = grp * gs + e * es;
                        let dh = gd[idx] * gv[e];
                        dx[idx] = rstd[grp] / lf * (lf * dh - s1 - xhat[idx] * s2);
                    }
                }
                self.acc(grads, *x, self.like(*x, dx));
                self.acc(grads, *gamma, self.like(*gamma, dgamma));
                self.acc(grads, *beta, self.like(*beta, dbeta));
            }
            Op::L2Rows { x, norms } => {
                let (n, d) = node.value.dims2();
                let y = node.value.data();
                let mut dx = vec![F::zero(); n * d];
                for r in 0..n {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let proj: F = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for c in 0..d {
                        dx[r * d + c] = (gr[c] - yr[c] * proj) / norms[r];
                    }
                }
                self.acc(grads, *x, self.like(*x, dx));
            }
            Op::Attention { q, k, v, layout, heads, probs } => {
                let (_, d) = self.value(*q).dims2();
                let dh = d / heads;
                let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![F::zero(); qv.len()];
                let mut dk = vec![F::zero(); kv.len()];
                let mut dv = vec![F::zero(); vv.len()];
                let mut pi = 0;
                for grp in &layout.groups {
                    let gk = grp.keys.len();
                    for h in 0..*heads {
                        let c0 = h * dh;
                        let p = &probs[pi];
                        pi += 1;
                        let mut ds = vec![F::zero(); gk];
                        for (qi, &qr) in grp.queries.iter().enumerate() {
                            let prow = &p[qi * gk..(qi + 1) * gk];
                            let gout = &gd[qr * d + c0..qr * d + c0 + dh];
                            let mut dot = F::zero();
                            for (kj, &kr) in grp.keys.iter().enumerate() {
                                let dp = (0..dh).map(|c| gout[c] * vv[kr * d + c0 + c]).sum::<F>();
                                ds[kj] = dp;
                                dot += prow[kj] * dp;
                                for c in 0..dh {
                                    dv[kr * d + c0 + c] += prow[kj] * gout[c];
                                }
                            }
                            for (kj, &kr) in grp.keys.iter().enumerate() {
                                let s = prow[kj] * (ds[kj] - dot) * scale;
                                if s == F::zero() {
                                    continue;
                                }
                                for c in 0..dh {
                                    dq[qr * d + c0 + c] += s * kv[kr * d + c0 + c];
                                    dk[kr * d + c0 + c] += s * qv[qr * d + c0 + c];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *q, self.like(*q, dq));
                self.acc(grads, *k, self.like(*k, dk));
                self.acc(grads, *v, self.like(*v, dv));
            }
            Op::Conv3d { x, w, geom, cols } => {
                let so = geom.out_len();
                let wk = geom.col_rows();
                let dout = MatRef::new(gd, geom.cout, so);
                if self.ng(*w) {
                    let mut dw = vec![F::zero(); geom.cout * wk];
                    gemm(dout, MatRef::new(cols, wk, so).t(), F::zero(), &mut dw);
                    self.acc(grads, *w, self.like(*w, dw));
                }
                if self.ng(*x) {
                    let mut dcols = vec![F::zero(); wk * so];
                    gemm(MatRef::new(self.value(*w).data(), geom.cout, wk).t(), dout, F::zero(), &mut dcols);
                    let dx = col2im(&dcols, geom);
                    self.acc(grads, *x, self.like(*x, dx));
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (n, c) = self.value(*logits).dims2();
                let scale = gd[0] / F::from_usize(n).unwrap();
                let mut dz = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dz[r * c + t] -= F::one();
                }
                for v in dz.iter_mut() {
                    *v *= scale;
                }
                self.acc(grads, *logits, self.like(*logits, dz));
            }
            Op::Bce { p, labels, eps } => {
                let pv = self.value(*p).data();
                let kf = F::from_usize(labels.len()).unwrap();
                let dp = pv
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if p <= *eps || p >= F::one() - *eps {
                            F::zero()
                        } else {
                            gd[0] * (-y / p + (F::one() - y) / (F::one() - p)) / kf
                        }
                    })
                    .collect();
                self.acc(grads, *p, self.like(*p, dp));
            }
            Op::KlTarget { z, target, q } => {
                let mass: F = target.iter().copied().sum();
                let dz = q.iter().zip(target).map(|(qq, pp)| gd[0] * (*qq * mass - *pp)).collect();
                self.acc(grads, *z, self.like(*z, dz));
            }
            Op::KlFromTarget { z, excess, q, kl } => {
                let dz = q.iter().zip(excess).map(|(qq, a)| gd[0] * *qq * (*a - *kl)).collect();
                self.acc(grads, *z, self.like(*z, dz));
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, self.like(*x, vec![gd[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = gd[0] / F::from_usize(n).unwrap();
                self.acc(grads, *x, self.like(*x, vec![v; n]));
            }
            Op::Dot { x, weights } => {
                self.acc(grads, *x, self.like(*x, weights.iter().map(|w| *w * gd[0]).collect()));
            }
            Op::Pick { x, index } => {
                let mut dx = vec![F::zero(); self.value(*x).len()];
                dx[*index] = gd[0];
                self.acc(grads, *x, self.like(*x, dx));
            }
        }
    }
}

fn im2col<F: Float>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let [d, h, w] = g.dims;
    let [od, oh, ow] = g.out_dims;
    let so = g.out_len();
    let k = g.kernel;
    let mut cols = vec![F::zero(); g.col_rows() * so];
    for ci in 0..g.cin {
        let base = ci * d * h * w;
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let dst = &mut cols[row * so..(row + 1) * so];
                    for z in 0..od {
                        let iz = (z * g.stride + kd) as isize - g.pad as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = (y * g.stride + kh) as isize - g.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = base + (iz as usize * h + iy as usize) * w;
                            let dst_row = (z * oh + y) * ow;
                            for xx in 0..ow {
                                let ix = (xx * g.stride + kw) as isize - g.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[dst_row + xx] = x[src_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Float>(cols: &[F], g: &ConvGeom) -> Vec<F> {
    let [d, h, w] = g.dims;
    let [od, oh, ow] = g.out_dims;
    let so = g.out_len();
    let k = g.kernel;
    let mut x = vec![F::zero(); g.cin * d * h * w];
    for ci in 0..g.cin {
        let base = ci * d * h * w;
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let src = &cols[row * so..(row + 1) * so];
                    for z in 0..od {
                        let iz = (z * g.stride + kd) as isize - g.pad as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = (y * g.stride + kh) as isize - g.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = base + (iz as usize * h + iy as usize) * w;
                            let src_row = (z * oh + y) * ow;
                            for xx in 0..ow {
                                let ix = (xx * g.stride + kw) as isize - g.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    x[dst_row + ix as usize] += src[src_row + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Result of [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    bound: Vec<(ParamId, Var)>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of the output with respect to a node, if it reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.bound.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.get(*v))
    }

    /// Parameter gradients in binding order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.bound.iter().filter_map(|(p, v)| self.get(*v).map(|g| (*p, g)))
    }
}
