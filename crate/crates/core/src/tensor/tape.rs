//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value and the data its
//! backward rule needs. Nodes are appended after their parents, so the vector
//! order is a valid topological order and `backward` is a single reverse sweep.
//!
//! Shape errors inside the tape are programming errors and panic; the model
//! layers validate user-facing inputs before recording anything.

use std::rc::Rc;

use super::{gemm, Tensor};
use crate::error::{invalid, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse row-major matrix: for each row, `(column, weight)` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Csr {
    pub n_cols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl Csr {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn identity(n: usize) -> Self {
        Self { n_cols: n, rows: (0..n).map(|i| vec![(i, 1.0)]).collect() }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    MulLastBroadcast { x: Var, mask: Var },
    Linear { x: Var, w: Var },
    MixAxis { a: Var, x: Var, axis: usize },
    Bmm { a: Var, b: Var, m: usize, k: usize, n: usize, trans_b: bool },
    Shift { x: Var, axis: usize, offset: isize },
    SliceLast { x: Var, start: usize },
    ConcatLast(Vec<Var>),
    PadAxis { x: Var, axis: usize },
    Reshape(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Lif { x: Var, tau: Var, v_threshold: f64, v_reset: f64, width: f64, mid: Vec<f64>, prev: Vec<f64> },
    Heaviside { x: Var, threshold: f64, width: f64 },
    Sigmoid(Var),
    Recip(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    SumAll(Var),
    MeanAll(Var),
    MeanMiddle(Var),
    SparseMix { h: Rc<Vec<Csr>>, x: Var },
    DiagSsm { x: Var, decay_raw: Var, b_in: Var, c_out: Var, states: Vec<f64> },
    XorSt { b: Var, logits: Var },
    DiscreteKl { p: Var, q: Vec<f64> },
    Cosine { a: Var, b: Var, eps: f64 },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

fn op_parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(x, _)
        | Op::Shift { x, .. }
        | Op::SliceLast { x, .. }
        | Op::PadAxis { x, .. }
        | Op::Reshape(x)
        | Op::Heaviside { x, .. }
        | Op::Sigmoid(x)
        | Op::Recip(x)
        | Op::Clamp { x, .. }
        | Op::SumAll(x)
        | Op::MeanAll(x)
        | Op::MeanMiddle(x)
        | Op::SparseMix { x, .. } => vec![*x],
        Op::AddBias { x, bias } => vec![*x, *bias],
        Op::MulLastBroadcast { x, mask } => vec![*x, *mask],
        Op::Linear { x, w } => vec![*x, *w],
        Op::MixAxis { a, x, .. } => vec![*a, *x],
        Op::Bmm { a, b, .. } => vec![*a, *b],
        Op::ConcatLast(xs) => xs.clone(),
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Lif { x, tau, .. } => vec![*x, *tau],
        Op::DiagSsm { x, decay_raw, b_in, c_out, .. } => vec![*x, *decay_raw, *b_in, *c_out],
        Op::XorSt { b, logits } => vec![*b, *logits],
        Op::DiscreteKl { p, .. } => vec![*p],
        Op::Cosine { a, b, .. } => vec![*a, *b],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Gradients collected by a single backward sweep, indexed by [`Var`].
#[derive(Debug, Default)]
pub struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Rectangular surrogate derivative of a hard threshold.
#[inline]
pub(crate) fn rect_surrogate(u: f64, threshold: f64, width: f64) -> f64 {
    if (u - threshold).abs() <= width / 2.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node, present once a backward sweep reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Indices of the parents of `v`, in argument order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        op_parents(&self.nodes[v.0].op)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => op_parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    // ----- leaves -------------------------------------------------------------

    /// Trainable leaf: receives a gradient on `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    // ----- elementwise --------------------------------------------------------

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    /// Elementwise `1/x`.
    pub fn recip(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| 1.0 / e);
        self.push(v, Op::Recip(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|e| e.clamp(lo, hi));
        self.push(v, Op::Clamp { x, lo, hi })
    }

    /// `x + bias`, broadcasting `bias` over the leading axes of `x`; the
    /// shape of `bias` must equal a suffix of the shape of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vb.len();
        assert!(vx.shape().ends_with(vb.shape()), "bias shape must be a suffix of the input shape");
        let data = vx.data().iter().enumerate().map(|(i, &e)| e + vb.data()[i % n]).collect();
        let v = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(v, Op::AddBias { x, bias })
    }

    /// `x[..., n] * mask[..., 1]`, broadcasting the mask along the last axis.
    pub fn mul_last_broadcast(&mut self, x: Var, mask: Var) -> Var {
        let (vx, vm) = (self.value(x), self.value(mask));
        let n = vx.last_dim();
        assert_eq!(vm.len() * n, vx.len(), "mask must have one entry per row");
        let data = vx.data().iter().enumerate().map(|(i, &e)| e * vm.data()[i / n]).collect();
        let v = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(v, Op::MulLastBroadcast { x, mask })
    }

    // ----- linear algebra -----------------------------------------------------

    /// `x[..., k] · w[k, n] -> [..., n]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vw.ndim(), 2, "weight must be a matrix");
        let (k, n) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(vx.last_dim(), k, "inner dimension mismatch");
        let rows = vx.len() / k;
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, vx.data(), false, vw.data(), false, &mut out, false);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::from_parts(shape, out), Op::Linear { x, w })
    }

    /// Mixes slices along `axis` with an `n×n` matrix: `y[.., i, ..] = Σ_j a[i, j] x[.., j, ..]`.
    pub fn mix_axis(&mut self, a: Var, x: Var, axis: usize) -> Var {
        let (va, vx) = (self.value(a), self.value(x));
        let (outer, n, inner) = Tensor::axis_split(vx.shape(), axis);
        assert_eq!(va.shape(), &[n, n], "mixing matrix must be n×n along the axis");
        let mut out = vec![0.0; vx.len()];
        for o in 0..outer {
            let s = o * n * inner;
            gemm(n, n, inner, va.data(), false, &vx.data()[s..s + n * inner], false, &mut out[s..s + n * inner], false);
        }
        let v = Tensor::from_parts(vx.shape().to_vec(), out);
        self.push(v, Op::MixAxis { a, x, axis })
    }

    /// Batched product over the last two axes. With `trans_b`, `b` holds `[.., n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let nd = va.ndim();
        assert!(nd >= 2 && vb.ndim() == nd, "bmm needs matching ranks ≥ 2");
        assert_eq!(va.shape()[..nd - 2], vb.shape()[..nd - 2], "bmm batch dims differ");
        let (m, k) = (va.shape()[nd - 2], va.shape()[nd - 1]);
        let n = if trans_b {
            assert_eq!(vb.shape()[nd - 1], k);
            vb.shape()[nd - 2]
        } else {
            assert_eq!(vb.shape()[nd - 2], k);
            vb.shape()[nd - 1]
        };
        let batch = va.len() / (m * k);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va.data()[i * m * k..(i + 1) * m * k],
                false,
                &vb.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = va.shape().to_vec();
        shape[nd - 1] = n;
        self.push(Tensor::from_parts(shape, out), Op::Bmm { a, b, m, k, n, trans_b })
    }

    /// `y[.., t, ..] = x[.., t + offset, ..]`, zero outside the axis.
    pub fn shift(&mut self, x: Var, axis: usize, offset: isize) -> Var {
        let vx = self.value(x);
        let (outer, n, inner) = Tensor::axis_split(vx.shape(), axis);
        let mut out = vec![0.0; vx.len()];
        for o in 0..outer {
            for t in 0..n {
                let src = t as isize + offset;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let d = (o * n + t) * inner;
                let s = (o * n + src as usize) * inner;
                out[d..d + inner].copy_from_slice(&vx.data()[s..s + inner]);
            }
        }
        let v = Tensor::from_parts(vx.shape().to_vec(), out);
        self.push(v, Op::Shift { x, axis, offset })
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let n = vx.last_dim();
        assert!(start + len <= n, "slice out of range");
        let rows = vx.len() / n;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&vx.data()[r * n + start..r * n + start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push(Tensor::from_parts(shape, out), Op::SliceLast { x, start })
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let lead = self.value(xs[0]).shape()[..self.value(xs[0]).ndim() - 1].to_vec();
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.value(v).shape();
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat leading dims differ");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let d = self.value(v).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::from_parts(shape, out), Op::ConcatLast(xs.to_vec()))
    }

    /// Zero-pads `axis` up to `len`.
    pub fn pad_axis(&mut self, x: Var, axis: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (outer, n, inner) = Tensor::axis_split(vx.shape(), axis);
        assert!(len >= n, "padding cannot shrink an axis");
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            out[o * len * inner..o * len * inner + n * inner]
                .copy_from_slice(&vx.data()[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, out), Op::PadAxis { x, axis })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape).expect("reshape keeps element count");
        self.push(v, Op::Reshape(x))
    }

    // ----- normalization and spiking ------------------------------------------

    /// Per-channel (last axis) batch normalization.
    ///
    /// With `running = None` the batch statistics are used and returned so the
    /// caller can update its running estimates; otherwise the given
    /// `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let vx = self.value(x);
        let c = vx.last_dim();
        let rows = vx.len() / c;
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        mean[j] += vx.data()[r * c + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        let d = vx.data()[r * c + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; vx.len()];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            for j in 0..c {
                let i = r * c + j;
                xhat[i] = (vx.data()[i] - mean[j]) * inv_std[j];
                out[i] = g[j] * xhat[i] + b[j];
            }
        }
        let v = Tensor::from_parts(vx.shape().to_vec(), out);
        let batch_stats = running.is_none();
        let var_out = self.push(v, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats });
        (var_out, mean, var)
    }

    /// Multi-step LIF neuron along axis 1 of `x` (`[batch, time, ...]`) with a
    /// scalar membrane time constant, hard reset and a rectangular surrogate.
    pub fn lif(&mut self, x: Var, tau: Var, v_threshold: f64, v_reset: f64, width: f64) -> Var {
        let vx = self.value(x);
        let t_len = vx.shape()[1];
        let b = vx.shape()[0];
        let inner = vx.len() / (b * t_len);
        let tau_v = self.value(tau).item();
        let mut mid = vec![0.0; vx.len()];
        let mut prev = vec![0.0; vx.len()];
        let mut out = vec![0.0; vx.len()];
        for bi in 0..b {
            let mut v = vec![v_reset; inner];
            for t in 0..t_len {
                let base = (bi * t_len + t) * inner;
                for j in 0..inner {
                    let i = base + j;
                    prev[i] = v[j];
                    let h = v[j] + (vx.data()[i] - v[j]) / tau_v;
                    mid[i] = h;
                    if h > v_threshold {
                        out[i] = 1.0;
                        v[j] = v_reset;
                    } else {
                        v[j] = h;
                    }
                }
            }
        }
        let v = Tensor::from_parts(vx.shape().to_vec(), out);
        self.push(v, Op::Lif { x, tau, v_threshold, v_reset, width, mid, prev })
    }

    /// Stateless spike: `1[x > threshold]` with a rectangular surrogate.
    pub fn heaviside(&mut self, x: Var, threshold: f64, width: f64) -> Var {
        let v = self.value(x).map(|e| if e > threshold { 1.0 } else { 0.0 });
        self.push(v, Op::Heaviside { x, threshold, width })
    }

    // ----- reductions ---------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::MeanAll(x))
    }

    /// `[b, ..., c] -> [b, c]`, averaging every axis between the first and last.
    pub fn mean_middle(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let b = vx.shape()[0];
        let c = vx.last_dim();
        let m = vx.len() / (b * c);
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for r in 0..m {
                for j in 0..c {
                    out[bi * c + j] += vx.data()[(bi * m + r) * c + j];
                }
            }
        }
        out.iter_mut().for_each(|e| *e /= m as f64);
        self.push(Tensor::from_parts(vec![b, c], out), Op::MeanMiddle(x))
    }

    // ----- model-specific fused ops -------------------------------------------

    /// Per-sample sparse propagation `y_b = H_b · x_b` for `x: [batch, nodes, c]`.
    pub fn sparse_mix(&mut self, h: Rc<Vec<Csr>>, x: Var) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.ndim(), 3, "sparse_mix expects [batch, nodes, channels]");
        let (b, nn, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert_eq!(h.len(), b, "one sparse matrix per sample");
        let mut out = vec![0.0; vx.len()];
        for (bi, m) in h.iter().enumerate() {
            assert!(m.n_rows() == nn && m.n_cols == nn, "sparse matrix must be nodes×nodes");
            for (i, row) in m.rows.iter().enumerate() {
                let dst = (bi * nn + i) * c;
                for &(j, w) in row {
                    let src = (bi * nn + j) * c;
                    for q in 0..c {
                        out[dst + q] += w * vx.data()[src + q];
                    }
                }
            }
        }
        let v = Tensor::from_parts(vx.shape().to_vec(), out);
        self.push(v, Op::SparseMix { h, x })
    }

    /// Diagonal linear state-space recurrence along axis 1 of `x: [b, t, tokens, d]`:
    /// `h[t] = σ(decay_raw)∘h[t−1] + b_in·x[t]`, `y[t] = Σ_n c_out·h[t]`,
    /// with `decay_raw, b_in, c_out: [d, n_state]`.
    pub fn diag_ssm(&mut self, x: Var, decay_raw: Var, b_in: Var, c_out: Var) -> Result<Var> {
        let vx = self.value(x);
        assert_eq!(vx.ndim(), 4, "diag_ssm expects [batch, time, tokens, channels]");
        let (b, t_len, tok, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let ns = self.value(decay_raw).shape()[1];
        assert_eq!(self.value(decay_raw).shape(), &[d, ns]);
        let a: Vec<f64> = self.value(decay_raw).data().iter().map(|&r| sigmoid(r)).collect();
        let bw = self.value(b_in).data();
        let cw = self.value(c_out).data();
        let mut states = vec![0.0; b * t_len * tok * d * ns];
        let mut out = vec![0.0; vx.len()];
        for bi in 0..b {
            for k in 0..tok {
                for t in 0..t_len {
                    let xi = ((bi * t_len + t) * tok + k) * d;
                    let si = xi * ns;
                    let prev = if t == 0 { None } else { Some(((bi * t_len + t - 1) * tok + k) * d * ns) };
                    for c in 0..d {
                        let mut y = 0.0;
                        for s in 0..ns {
                            let p = prev.map_or(0.0, |pi| states[pi + c * ns + s]);
                            let h = a[c * ns + s] * p + bw[c * ns + s] * vx.data()[xi + c];
                            states[si + c * ns + s] = h;
                            y += cw[c * ns + s] * h;
                        }
                        out[xi + c] = y;
                    }
                }
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(crate::error::numeric("state-space recurrence produced a non-finite state"));
        }
        let v = Tensor::from_parts(vx.shape().to_vec(), out);
        Ok(self.push(v, Op::DiagSsm { x, decay_raw, b_in, c_out, states }))
    }

    /// `b ⊕ gamma` with a straight-through gradient: identity towards `b`, and
    /// `(1 − 2b)·σ'(logits)` towards the sampler logits.
    pub fn xor_st(&mut self, b: Var, logits: Var, gamma: &Tensor) -> Var {
        let vb = self.value(b);
        assert_eq!(vb.shape(), gamma.shape());
        assert_eq!(vb.shape(), self.value(logits).shape());
        let data = vb
            .data()
            .iter()
            .zip(gamma.data())
            .map(|(&x, &g)| if (x != 0.0) != (g != 0.0) { 1.0 } else { 0.0 })
            .collect();
        let v = Tensor::from_parts(vb.shape().to_vec(), data);
        self.push(v, Op::XorSt { b, logits })
    }

    /// Mean Bernoulli KL between `p` and a per-channel constant prior `q`.
    pub fn discrete_kl(&mut self, p: Var, q: &[f64]) -> Var {
        let vp = self.value(p);
        let c = vp.last_dim();
        assert_eq!(q.len(), c, "prior needs one entry per channel");
        let total: f64 = vp
            .data()
            .iter()
            .enumerate()
            .map(|(i, &pi)| bernoulli_kl(pi, q[i % c]))
            .sum();
        let v = Tensor::scalar(total / vp.len() as f64);
        self.push(v, Op::DiscreteKl { p, q: q.to_vec() })
    }

    /// Batch mean of per-sample `⟨a/(‖a‖+ε), b/(‖b‖+ε)⟩`.
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "cosine operands differ in shape");
        let batch = va.shape()[0];
        let per = va.len() / batch;
        let mut total = 0.0;
        for s in 0..batch {
            let x = &va.data()[s * per..(s + 1) * per];
            let y = &vb.data()[s * per..(s + 1) * per];
            total += cosine_eps(x, y, eps);
        }
        let v = Tensor::scalar(total / batch as f64);
        self.push(v, Op::Cosine { a, b, eps })
    }

    /// Mean softmax cross-entropy of `logits: [batch, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (b, k) = (vl.shape()[0], vl.shape()[1]);
        if labels.len() != b {
            return Err(invalid(format!("{} labels for a batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for s in 0..b {
            let row = &vl.data()[s * k..(s + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[s * k + j] = (row[j] - mx).exp() / z;
            }
            loss += -(row[labels[s]] - mx - z.ln());
        }
        let v = Tensor::scalar(loss / b as f64);
        Ok(self.push(v, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    // ----- backward -----------------------------------------------------------

    /// Propagates from a scalar `loss` and adds the result into every reached
    /// node's accumulated gradient (repeated calls accumulate).
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g.clone())),
                }
            }
        }
        Ok(Grads(grads))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddBias { x, bias } => {
                acc(*x, g.to_vec());
                if needs(*bias) {
                    let n = val(*bias).len();
                    let mut gb = vec![0.0; n];
                    g.iter().enumerate().for_each(|(j, v)| gb[j % n] += v);
                    acc(*bias, gb);
                }
            }
            Op::MulLastBroadcast { x, mask } => {
                let n = *shape(*x).last().unwrap();
                let m = val(*mask);
                if needs(*x) {
                    acc(*x, g.iter().enumerate().map(|(j, v)| v * m[j / n]).collect());
                }
                if needs(*mask) {
                    let xv = val(*x);
                    let mut gm = vec![0.0; m.len()];
                    g.iter().enumerate().for_each(|(j, v)| gm[j / n] += v * xv[j]);
                    acc(*mask, gm);
                }
            }
            Op::Linear { x, w } => {
                let (k, n) = (shape(*w)[0], shape(*w)[1]);
                let rows = g.len() / n;
                if needs(*x) {
                    let mut gx = vec![0.0; rows * k];
                    gemm(rows, n, k, g, false, val(*w), true, &mut gx, false);
                    acc(*x, gx);
                }
                if needs(*w) {
                    let mut gw = vec![0.0; k * n];
                    gemm(k, rows, n, val(*x), true, g, false, &mut gw, false);
                    acc(*w, gw);
                }
            }
            Op::MixAxis { a, x, axis } => {
                let (outer, n, inner) = Tensor::axis_split(shape(*x), *axis);
                if needs(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..outer {
                        let s = o * n * inner;
                        gemm(n, n, inner, val(*a), true, &g[s..s + n * inner], false, &mut gx[s..s + n * inner], false);
                    }
                    acc(*x, gx);
                }
                if needs(*a) {
                    let mut ga = vec![0.0; n * n];
                    let xv = val(*x);
                    for o in 0..outer {
                        let s = o * n * inner;
                        gemm(n, inner, n, &g[s..s + n * inner], false, &xv[s..s + n * inner], true, &mut ga, true);
                    }
                    acc(*a, ga);
                }
            }
            Op::Bmm { a, b, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                let batch = g.len() / (m * n);
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        // ga = g · bᵀ (b is k×n, or n×k when transposed)
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    acc(*a, ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let ga_s = &av[i * m * k..(i + 1) * m * k];
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // b stored n×k: gbᵀ = gᵀ · a
                            gemm(n, m, k, gs, true, ga_s, false, out, false);
                        } else {
                            gemm(k, m, n, ga_s, true, gs, false, out, false);
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Shift { x, axis, offset } => {
                let (outer, n, inner) = Tensor::axis_split(shape(*x), *axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for t in 0..n {
                        let src = t as isize + offset;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        let d = (o * n + t) * inner;
                        let s = (o * n + src as usize) * inner;
                        for q in 0..inner {
                            gx[s + q] += g[d + q];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::SliceLast { x, start } => {
                let n = *shape(*x).last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let rows = g.len() / len;
                let mut gx = vec![0.0; rows * n];
                for r in 0..rows {
                    gx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*x, gx);
            }
            Op::ConcatLast(xs) => {
                let total = *node.value.shape().last().unwrap();
                let rows = g.len() / total;
                let mut off = 0;
                for &v in xs {
                    let w = *shape(v).last().unwrap();
                    if needs(v) {
                        let mut gx = vec![0.0; rows * w];
                        for r in 0..rows {
                            gx[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        acc(v, gx);
                    }
                    off += w;
                }
            }
            Op::PadAxis { x, axis } => {
                let (outer, n, inner) = Tensor::axis_split(shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    gx[o * n * inner..(o + 1) * n * inner]
                        .copy_from_slice(&g[o * len * inner..o * len * inner + n * inner]);
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = inv_std.len();
                let rows = g.len() / c;
                let gam = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        sum_g[j] += g[r * c + j];
                        sum_gx[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
                if needs(*x) {
                    let mut gx = vec![0.0; g.len()];
                    let m = rows as f64;
                    for r in 0..rows {
                        for j in 0..c {
                            let i = r * c + j;
                            gx[i] = if *batch_stats {
                                gam[j] * inv_std[j] / m * (m * g[i] - sum_g[j] - xhat[i] * sum_gx[j])
                            } else {
                                gam[j] * inv_std[j] * g[i]
                            };
                        }
                    }
                    acc(*x, gx);
                }
                acc(*gamma, sum_gx);
                acc(*beta, sum_g);
            }
            Op::Lif { x, tau, v_threshold, v_reset, width, mid, prev } => {
                let sh = shape(*x);
                let (b, t_len) = (sh[0], sh[1]);
                let inner = g.len() / (b * t_len);
                let tau_v = val(*tau)[0];
                let xv = val(*x);
                let s = node.value.data();
                let mut gx = vec![0.0; g.len()];
                let mut gtau = 0.0;
                for bi in 0..b {
                    let mut gv = vec![0.0; inner];
                    for t in (0..t_len).rev() {
                        let base = (bi * t_len + t) * inner;
                        for j in 0..inner {
                            let i = base + j;
                            let sg = rect_surrogate(mid[i], *v_threshold, *width);
                            let dv_dh = (1.0 - s[i]) + (v_reset - mid[i]) * sg;
                            let gh = g[i] * sg + gv[j] * dv_dh;
                            gx[i] = gh / tau_v;
                            gtau += gh * (-(xv[i] - prev[i]) / (tau_v * tau_v));
                            gv[j] = gh * (1.0 - 1.0 / tau_v);
                        }
                    }
                }
                if needs(*x) {
                    acc(*x, gx);
                }
                acc(*tau, vec![gtau]);
            }
            Op::Heaviside { x, threshold, width } => {
                let xv = val(*x);
                acc(*x, g.iter().zip(xv).map(|(v, &u)| v * rect_surrogate(u, *threshold, *width)).collect());
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(v, s)| v * s * (1.0 - s)).collect());
            }
            Op::Recip(x) => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(v, r)| -v * r * r).collect());
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                acc(*x, g.iter().zip(xv).map(|(v, &u)| if u >= *lo && u <= *hi { *v } else { 0.0 }).collect());
            }
            Op::SumAll(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::MeanAll(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::MeanMiddle(x) => {
                let sh = shape(*x);
                let (b, c) = (sh[0], sh[sh.len() - 1]);
                let n = val(*x).len();
                let m = n / (b * c);
                let mut gx = vec![0.0; n];
                for bi in 0..b {
                    for r in 0..m {
                        for j in 0..c {
                            gx[(bi * m + r) * c + j] = g[bi * c + j] / m as f64;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::SparseMix { h, x } => {
                let sh = shape(*x);
                let (nn, c) = (sh[1], sh[2]);
                let mut gx = vec![0.0; g.len()];
                for (bi, m) in h.iter().enumerate() {
                    for (i, row) in m.rows.iter().enumerate() {
                        let src = (bi * nn + i) * c;
                        for &(j, w) in row {
                            let dst = (bi * nn + j) * c;
                            for q in 0..c {
                                gx[dst + q] += w * g[src + q];
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::DiagSsm { x, decay_raw, b_in, c_out, states } => {
                let sh = shape(*x);
                let (b, t_len, tok, d) = (sh[0], sh[1], sh[2], sh[3]);
                let ns = shape(*decay_raw)[1];
                let a: Vec<f64> = val(*decay_raw).iter().map(|&r| sigmoid(r)).collect();
                let (bw, cw, xv) = (val(*b_in), val(*c_out), val(*x));
                let mut gx = vec![0.0; g.len()];
                let mut ga = vec![0.0; d * ns];
                let mut gb = vec![0.0; d * ns];
                let mut gc = vec![0.0; d * ns];
                for bi in 0..b {
                    for k in 0..tok {
                        let mut gh_next = vec![0.0; d * ns];
                        for t in (0..t_len).rev() {
                            let xi = ((bi * t_len + t) * tok + k) * d;
                            let si = xi * ns;
                            let prev = if t == 0 { None } else { Some(((bi * t_len + t - 1) * tok + k) * d * ns) };
                            for c in 0..d {
                                let mut gxc = 0.0;
                                for s in 0..ns {
                                    let e = c * ns + s;
                                    let h = states[si + e];
                                    let gh = cw[e] * g[xi + c] + a[e] * gh_next[e];
                                    gc[e] += g[xi + c] * h;
                                    ga[e] += gh * prev.map_or(0.0, |pi| states[pi + e]);
                                    gb[e] += gh * xv[xi + c];
                                    gxc += gh * bw[e];
                                    gh_next[e] = gh;
                                }
                                gx[xi + c] = gxc;
                            }
                        }
                    }
                }
                if needs(*x) {
                    acc(*x, gx);
                }
                acc(*decay_raw, ga.iter().zip(&a).map(|(g, a)| g * a * (1.0 - a)).collect());
                acc(*b_in, gb);
                acc(*c_out, gc);
            }
            Op::XorSt { b, logits } => {
                acc(*b, g.to_vec());
                if needs(*logits) {
                    let (bv, lv) = (val(*b), val(*logits));
                    acc(
                        *logits,
                        g.iter()
                            .zip(bv.iter().zip(lv))
                            .map(|(v, (&bb, &l))| {
                                let s = sigmoid(l);
                                v * (1.0 - 2.0 * bb) * s * (1.0 - s)
                            })
                            .collect(),
                    );
                }
            }
            Op::DiscreteKl { p, q } => {
                let pv = val(*p);
                let c = q.len();
                let n = pv.len() as f64;
                acc(
                    *p,
                    pv.iter()
                        .enumerate()
                        .map(|(i, &pi)| {
                            let qi = q[i % c];
                            g[0] * ((pi / qi).ln() - ((1.0 - pi) / (1.0 - qi)).ln()) / n
                        })
                        .collect(),
                );
            }
            Op::Cosine { a, b, eps } => {
                let (av, bv) = (val(*a), val(*b));
                let batch = shape(*a)[0];
                let per = av.len() / batch;
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                let scale = g[0] / batch as f64;
                for s in 0..batch {
                    let x = &av[s * per..(s + 1) * per];
                    let y = &bv[s * per..(s + 1) * per];
                    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let (sx, sy) = (nx + eps, ny + eps);
                    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                    for j in 0..per {
                        // d/dx [ (x·y) / (sx·sy) ] with d‖x‖/dx = x/‖x‖ (zero at the origin).
                        let rx = if nx > 0.0 { x[j] / nx } else { 0.0 };
                        let ry = if ny > 0.0 { y[j] / ny } else { 0.0 };
                        ga[s * per + j] = scale * (y[j] / (sx * sy) - dot * rx / (sx * sx * sy));
                        gb[s * per + j] = scale * (x[j] / (sx * sy) - dot * ry / (sx * sy * sy));
                    }
                }
                if needs(*a) {
                    acc(*a, ga);
                }
                if needs(*b) {
                    acc(*b, gb);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = shape(*logits)[1];
                let b = labels.len();
                let mut gl = probs.clone();
                for (s, &l) in labels.iter().enumerate() {
                    gl[s * k + l] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= g[0] / b as f64);
                acc(*logits, gl);
            }
        }
    }
}

/// Bernoulli KL divergence `KL(Bern(p) ‖ Bern(q))`.
pub(crate) fn bernoulli_kl(p: f64, q: f64) -> f64 {
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

pub(crate) fn cosine_eps(x: &[f64], y: &[f64], eps: f64) -> f64 {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
    dot / ((nx + eps) * (ny + eps))
}
