//! Dynamic tape for reverse-mode differentiation.
//!
//! Every forward operation appends a node holding its value and enough
//! saved state to run its vector-Jacobian product. A tape lives for one
//! forward/backward pass and is dropped afterwards.

use crate::error::{Error, Result};
use crate::kernels::{axpy, dot, gemm, gemm_nt, gemm_tn};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Sigmoid,
    Gelu,
    Silu,
    Tanh,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        blen: usize,
    },
    Scale {
        x: Var,
        c: F,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Softmax {
        x: Var,
        n: usize,
    },
    LayerNorm {
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
        d: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Mse {
        pred: Var,
        target: Var,
        weights: Option<Vec<F>>,
        denom: F,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        d: usize,
    },
    Sum {
        x: Var,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        full: usize,
        start: usize,
        len: usize,
    },
    Expand {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        lq: usize,
        lk: usize,
        d: usize,
        heads: usize,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// lie on a differentiable path to the loss.
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    pub fn get_slice(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate<F: Real>(slot: &mut Option<Vec<F>>, contrib: Vec<F>) {
    match slot {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Tape that never records gradient requirements; used for inference
    /// and for frozen sub-networks.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. `requires_grad` is ignored on a no-grad tape.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Loads a parameter as a leaf. Frozen parameters never require grad.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: self.grad_enabled && !p.frozen,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameters loaded on this tape with their node handles.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
    }

    // ---------------------------------------------------------------- algebra

    /// `a[m×k] · b[k×n]`; strictly rank 2.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        self.matmul_impl(a, b, sa[0], sa[1], sb[1], vec![sa[0], sb[1]])
    }

    /// `x[..., k] · w[k×n]` treating all leading axes of `x` as rows.
    pub fn matmul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::shape("matmul_rows", &sx, &sw));
        }
        let k = sw[0];
        let m = self.value(x).numel() / k;
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = sw[1];
        self.matmul_impl(x, w, m, k, sw[1], out_shape)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, m: usize, k: usize, n: usize, shape: Vec<usize>) -> Result<Var> {
        let mut out = vec![F::zero(); m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `x · w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_rows(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let blen = self.value(b).numel();
        let ok = sa == sb || blen == 1 || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb);
        if !ok {
            return Err(Error::shape(name, sa, sb));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<F> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[i % blen];
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Binary { kind, a, b, blen }, &[a, b]))
    }

    /// Elementwise sum; `b` may be a scalar or match the trailing axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::of(c);
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c }, &[x])
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = self.value(x).map(|v| match kind {
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Gelu => gelu(v),
            UnaryKind::Silu => v * sigmoid(v),
            UnaryKind::Tanh => v.tanh(),
        });
        self.push(value, Op::Unary { kind, x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::Softmax { x, n }, &[x]))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance,
    /// then applies the optional affine `scale`/`shift` of width `d`.
    pub fn layer_norm(&mut self, x: Var, scale: Option<Var>, shift: Option<Var>, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 {
            return Err(Error::EmptyAxis { op: "layer_norm" });
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        for p in [scale, shift].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let eps = F::of(eps);
        let xs = self.value(x).data();
        let rows = xs.len() / d;
        let mut xhat = vec![F::zero(); xs.len()];
        let mut rstd = vec![F::zero(); rows];
        let inv_d = F::one() / F::of(d as f64);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(s) = scale {
            let sv = self.value(s).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o *= sv[i % d];
            }
        }
        if let Some(b) = shift {
            let bv = self.value(b).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o += bv[i % d];
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let mut inputs = vec![x];
        inputs.extend(scale);
        inputs.extend(shift);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                scale,
                shift,
                d,
                xhat,
                rstd,
            },
            &inputs,
        ))
    }

    /// Mean squared error, reduced to a `[1]` scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.mse_impl(pred, target, None)
    }

    /// Weighted squared error normalized by the total weight. Weights are
    /// constants with the same element count as `pred`.
    pub fn weighted_mse(&mut self, pred: Var, target: Var, weights: &[f64]) -> Result<Var> {
        self.mse_impl(pred, target, Some(weights))
    }

    fn mse_impl(&mut self, pred: Var, target: Var, weights: Option<&[f64]>) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape("mse", self.shape(pred), self.shape(target)));
        }
        let n = self.value(pred).numel();
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let (loss, weights, denom) = match weights {
            None => {
                let denom = F::of(n as f64);
                let s = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<F>();
                (s / denom, None, denom)
            }
            Some(w) => {
                if w.len() != n {
                    return Err(Error::shape("weighted_mse", &[n], &[w.len()]));
                }
                let w: Vec<F> = w.iter().map(|&x| F::of(x)).collect();
                let total = w.iter().copied().sum::<F>();
                let denom = if total > F::zero() { total } else { F::one() };
                let s = p
                    .iter()
                    .zip(t)
                    .zip(&w)
                    .map(|((&a, &b), &wi)| wi * (a - b) * (a - b))
                    .sum::<F>();
                (s / denom, Some(w), denom)
            }
        };
        let value = Tensor::scalar(loss);
        Ok(self.push(
            value,
            Op::Mse {
                pred,
                target,
                weights,
                denom,
            },
            &[pred, target],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::Config("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Config(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut widths = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", &first, s));
            }
            let (_, ext, inner) = split_axis(s, axis);
            widths.push(ext * inner);
            total += ext;
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let row: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        debug_assert_eq!(row, total * inner);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            inputs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.value(x).numel() / (rows * cols);
        let src = self.value(x).data();
        let mut data = vec![F::zero(); src.len()];
        for b in 0..batch {
            let off = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    data[off + j * rows + i] = src[off + i * cols + j];
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Transpose { x, batch, rows, cols }, &[x]))
    }

    /// Gathers rows of `table[V×d]`; output `[ids.len() × d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("embedding", &s, &[]));
        }
        let (vocab, d) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(Error::EmptyAxis { op: "embedding" });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    len: vocab,
                });
            }
            data.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                d,
            },
            &[table],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over `axis`, which is removed from the shape (rank-1 inputs
    /// reduce to `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Config(format!("mean axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = vec![F::zero(); outer * inner];
        let inv = F::one() / F::of(n as f64);
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                axpy(inv, row, &mut data[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::MeanAxis { x, outer, n, inner }, &[x]))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Config(format!("narrow({axis}, {start}, {len}) out of range for {s:?}")));
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let full = ext * inner;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[o * full + start * inner..o * full + (start + len) * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::Narrow {
                x,
                outer,
                full,
                start: start * inner,
                len: len * inner,
            },
            &[x],
        ))
    }

    /// Inserts a new axis of extent `n` at `axis`, repeating the data.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis > s.len() || n == 0 {
            return Err(Error::Config(format!("expand({axis}, {n}) invalid for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                data.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s.clone();
        shape.insert(axis, n);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Expand { x, outer, n, inner }, &[x]))
    }

    /// Scaled dot-product attention without projections.
    ///
    /// `q: [B, Lq, d]`, `k, v: [B, Lk, d]` (rank-2 inputs are treated as
    /// B = 1). Head `h` uses columns `h*d/heads .. (h+1)*d/heads`, scores are
    /// scaled by `1/sqrt(d/heads)`, and the heads are concatenated back in
    /// the same column layout.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let dims = |s: &[usize]| -> Option<(usize, usize, usize)> {
            match s.len() {
                2 => Some((1, s[0], s[1])),
                3 => Some((s[0], s[1], s[2])),
                _ => None,
            }
        };
        let ((bq, lq, d), (bk, lk, dk)) = match (dims(&sq), dims(&sk)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("attention", &sq, &sk)),
        };
        if bq != bk || d != dk || sk != sv || sq.len() != sk.len() {
            return Err(Error::shape("attention", &sq, &sk));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![F::zero(); bq * heads * lq * lk];
        let mut out = vec![F::zero(); bq * lq * d];
        for b in 0..bq {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..lq {
                    let qrow = &qd[(b * lq + i) * d + col..(b * lq + i) * d + col + dh];
                    let prow = &mut probs[((b * heads + h) * lq + i) * lk..((b * heads + h) * lq + i + 1) * lk];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let krow = &kd[(b * lk + j) * d + col..(b * lk + j) * d + col + dh];
                        *p = dot(qrow, krow) * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(b * lq + i) * d + col..(b * lq + i) * d + col + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vrow = &vd[(b * lk + j) * d + col..(b * lk + j) * d + col + dh];
                        axpy(p, vrow, orow);
                    }
                }
            }
        }
        let value = Tensor::new(&sq, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                batch: bq,
                lq,
                lk,
                d,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities saved by an [`Tape::attention`] node, laid out
    /// `[B, heads, Lq, Lk]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // --------------------------------------------------------------- backward

    /// Reverse pass from a single-element `loss`. Nodes not on a
    /// differentiable path to the loss get no gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Drop gradients of nodes that do not require grad (they may have been
        // seeded by an upstream op that produced contributions anyway).
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm_nt(g, self.value(b).data(), &mut da, m, n, k);
                    accumulate(&mut grads[a.0], da);
                }
                if self.needs(b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm_tn(self.value(a).data(), g, &mut db, k, m, n);
                    accumulate(&mut grads[b.0], db);
                }
            }
            &Op::Binary { kind, a, b, blen } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.needs(a) {
                    let da: Vec<F> = match kind {
                        BinKind::Add | BinKind::Sub => g.to_vec(),
                        BinKind::Mul => g.iter().enumerate().map(|(j, &gj)| gj * bv[j % blen]).collect(),
                    };
                    accumulate(&mut grads[a.0], da);
                }
                if self.needs(b) {
                    let mut db = vec![F::zero(); blen];
                    for (j, &gj) in g.iter().enumerate() {
                        db[j % blen] += match kind {
                            BinKind::Add => gj,
                            BinKind::Sub => -gj,
                            BinKind::Mul => gj * av[j],
                        };
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            &Op::Scale { x, c } => {
                if self.needs(x) {
                    accumulate(&mut grads[x.0], g.iter().map(|&v| v * c).collect());
                }
            }
            &Op::Unary { kind, x } => {
                if self.needs(x) {
                    let xv = self.value(x).data();
                    let yv = node.value.data();
                    let dx = g
                        .iter()
                        .zip(xv.iter().zip(yv))
                        .map(|(&gj, (&xj, &yj))| {
                            gj * match kind {
                                UnaryKind::Sigmoid => yj * (F::one() - yj),
                                UnaryKind::Gelu => gelu_grad(xj),
                                UnaryKind::Silu => {
                                    let s = sigmoid(xj);
                                    s + xj * s * (F::one() - s)
                                }
                                UnaryKind::Tanh => F::one() - yj * yj,
                            }
                        })
                        .collect();
                    accumulate(&mut grads[x.0], dx);
                }
            }
            &Op::Softmax { x, n } => {
                if self.needs(x) {
                    let y = node.value.data();
                    let mut dx = vec![F::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let s = dot(yr, gr);
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                d,
                xhat,
                rstd,
            } => {
                let d = *d;
                if let Some(b) = shift {
                    if self.needs(*b) {
                        let mut db = vec![F::zero(); d];
                        for row in g.chunks(d) {
                            axpy(F::one(), row, &mut db);
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                }
                if let Some(s) = scale {
                    if self.needs(*s) {
                        let mut ds = vec![F::zero(); d];
                        for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                ds[j] += gr[j] * xr[j];
                            }
                        }
                        accumulate(&mut grads[s.0], ds);
                    }
                }
                if self.needs(*x) {
                    let sv = scale.map(|s| self.value(s).data());
                    let inv_d = F::one() / F::of(d as f64);
                    let mut dx = vec![F::zero(); g.len()];
                    let mut dxhat = vec![F::zero(); d];
                    for r in 0..rstd.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = match sv {
                                Some(s) => gr[j] * s[j],
                                None => gr[j],
                            };
                        }
                        let mean_d = dxhat.iter().copied().sum::<F>() * inv_d;
                        let mean_dx = dot(&dxhat, xr) * inv_d;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Mse {
                pred,
                target,
                weights,
                denom,
            } => {
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let two = F::of(2.0) * g[0] / *denom;
                let diff: Vec<F> = match weights {
                    None => p.iter().zip(t).map(|(&a, &b)| two * (a - b)).collect(),
                    Some(w) => p.iter().zip(t).zip(w).map(|((&a, &b), &wi)| two * wi * (a - b)).collect(),
                };
                if self.needs(*target) {
                    accumulate(&mut grads[target.0], diff.iter().map(|&v| -v).collect());
                }
                if self.needs(*pred) {
                    accumulate(&mut grads[pred.0], diff);
                }
            }
            Op::Concat { inputs, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut off = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if self.needs(v) {
                        let mut dv = Vec::with_capacity(outer * w);
                        for o in 0..*outer {
                            dv.extend_from_slice(&g[o * row + off..o * row + off + w]);
                        }
                        accumulate(&mut grads[v.0], dv);
                    }
                    off += w;
                }
            }
            &Op::Reshape { x } => {
                if self.needs(x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
            }
            &Op::Transpose { x, batch, rows, cols } => {
                if self.needs(x) {
                    let mut dx = vec![F::zero(); g.len()];
                    for b in 0..batch {
                        let off = b * rows * cols;
                        for i in 0..rows {
                            for j in 0..cols {
                                dx[off + i * cols + j] = g[off + j * rows + i];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Embedding { table, ids, d } => {
                if self.needs(*table) {
                    let mut dt = vec![F::zero(); self.value(*table).numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(F::one(), &g[r * d..(r + 1) * d], &mut dt[id * d..(id + 1) * d]);
                    }
                    accumulate(&mut grads[table.0], dt);
                }
            }
            &Op::Sum { x } => {
                if self.needs(x) {
                    accumulate(&mut grads[x.0], vec![g[0]; self.value(x).numel()]);
                }
            }
            &Op::MeanAxis { x, outer, n, inner } => {
                if self.needs(x) {
                    let inv = F::one() / F::of(n as f64);
                    let mut dx = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        for _ in 0..n {
                            dx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * inv));
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            &Op::Narrow {
                x,
                outer,
                full,
                start,
                len,
            } => {
                if self.needs(x) {
                    let mut dx = vec![F::zero(); outer * full];
                    for o in 0..outer {
                        dx[o * full + start..o * full + start + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            &Op::Expand { x, outer, n, inner } => {
                if self.needs(x) {
                    let mut dx = vec![F::zero(); outer * inner];
                    for o in 0..outer {
                        for r in 0..n {
                            let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                            axpy(F::one(), src, &mut dx[o * inner..(o + 1) * inner]);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                lq,
                lk,
                d,
                heads,
                probs,
            } => {
                let (batch, lq, lk, d, heads) = (*batch, *lq, *lk, *d, *heads);
                let dh = d / heads;
                let scale = F::of(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![F::zero(); qd.len()];
                let mut dk = vec![F::zero(); kd.len()];
                let mut dv = vec![F::zero(); vd.len()];
                let mut ds = vec![F::zero(); lk];
                for b in 0..batch {
                    for h in 0..heads {
                        let col = h * dh;
                        for i in 0..lq {
                            let prow = &probs[((b * heads + h) * lq + i) * lk..((b * heads + h) * lq + i + 1) * lk];
                            let grow = &g[(b * lq + i) * d + col..(b * lq + i) * d + col + dh];
                            for j in 0..lk {
                                let vrow = &vd[(b * lk + j) * d + col..(b * lk + j) * d + col + dh];
                                ds[j] = dot(grow, vrow);
                                axpy(prow[j], grow, &mut dv[(b * lk + j) * d + col..(b * lk + j) * d + col + dh]);
                            }
                            let s = dot(prow, &ds);
                            for j in 0..lk {
                                ds[j] = prow[j] * (ds[j] - s) * scale;
                            }
                            let qrow = &qd[(b * lq + i) * d + col..(b * lq + i) * d + col + dh];
                            for j in 0..lk {
                                let krow = &kd[(b * lk + j) * d + col..(b * lk + j) * d + col + dh];
                                axpy(ds[j], krow, &mut dq[(b * lq + i) * d + col..(b * lq + i) * d + col + dh]);
                                axpy(ds[j], qrow, &mut dk[(b * lk + j) * d + col..(b * lk + j) * d + col + dh]);
                            }
                        }
                    }
                }
                if self.needs(*q) {
                    accumulate(&mut grads[q.0], dq);
                }
                if self.needs(*k) {
                    accumulate(&mut grads[k.0], dk);
                }
                if self.needs(*v) {
                    accumulate(&mut grads[v.0], dv);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    F::of(0.5) * x * (F::one() + fast_tanh(c * (x + a * x * x * x)))
}

/// `tanh` through one `exp`; libm `tanh` is several times slower.
#[inline]
fn fast_tanh<F: Real>(x: F) -> F {
    let two = F::of(2.0);
    two * sigmoid(two * x) - F::one()
}

#[inline]
fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let inner = c * (x + a * x * x * x);
    let t = fast_tanh(inner);
    let dinner = c * (F::one() + F::of(3.0) * a * x * x);
    F::of(0.5) * (F::one() + t) + F::of(0.5) * x * (F::one() - t * t) * dinner
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = F::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}
