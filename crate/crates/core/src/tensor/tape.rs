//! Wengert-list reverse-mode differentiation.
//!
//! Every op evaluates eagerly, appends its output to the tape and returns a
//! [`Var`] handle. [`Tape::backward`] replays the list once, in reverse.

use super::kernels::{self, ConvGeom, Mat};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool, p: usize, q: usize, r: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias { x: Var, bias: Var },
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    ChannelNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, weight: Var, bias: Option<Var>, geom: ConvGeom, cout: usize },
    Upsample { x: Var, c: usize, h: usize, w: usize, oh: usize, ow: usize },
    Reshape(Var),
    Transpose { x: Var, rows: usize, cols: usize },
    Narrow { x: Var, axis: usize, start: usize, len: usize },
    Concat { xs: Vec<Var>, axis: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: usize, probs: Vec<T>, counted: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ChannelNorm { .. } => "channel_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::Reshape(_) => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    scope: usize,
    macs: u64,
}

/// Recording of one forward pass.
///
/// Single-threaded by construction; independent samples use independent tapes.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    scopes: Vec<String>,
    scope: usize,
    replayed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), scopes: vec![String::new()], scope: 0, replayed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Labels subsequently recorded ops for [`Tape::macs_by_scope`].
    pub fn set_scope(&mut self, name: &str) {
        self.scope = match self.scopes.iter().position(|s| s == name) {
            Some(i) => i,
            None => {
                self.scopes.push(name.to_string());
                self.scopes.len() - 1
            }
        };
    }

    /// Multiply-accumulate counts of matmul and conv ops, per scope label,
    /// in first-use order. The unlabeled scope is reported as "".
    pub fn macs_by_scope(&self) -> Vec<(String, u64)> {
        let mut totals = vec![0u64; self.scopes.len()];
        for n in &self.nodes {
            totals[n.scope] += n.macs;
        }
        self.scopes.iter().cloned().zip(totals).filter(|(s, m)| !s.is_empty() || *m > 0).collect()
    }

    pub fn total_macs(&self) -> u64 {
        self.nodes.iter().map(|n| n.macs).sum()
    }

    /// Records a copy of `t`; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records an owned tensor without copying its buffer.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push_leaf(shape, t.into_data(), rg)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape, data, op: Op::Leaf, requires_grad, scope: self.scope, macs: 0 });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("recorded nodes have consistent shapes")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward's loss w.r.t. `v`.
    ///
    /// `None` before backward or for values that do not track gradients;
    /// zeros for tracked values the loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var], macs: u64) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { shape, data, op, requires_grad, scope: self.scope, macs });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(format!("{what} expects a 2-D tensor, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[p,q] · b[q,r] -> [p,r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[p,q] · b[r,q]ᵀ -> [p,r]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (p, q) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (qb, r) = if b_transposed { (bc, br) } else { (br, bc) };
        if q != qb {
            return Err(Error::dim(format!(
                "matmul inner dims differ: {:?} x {:?}{}",
                self.shape(a),
                self.shape(b),
                if b_transposed { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); p * r];
        let bm = Mat::new(self.value(b), br, bc);
        kernels::gemm(Mat::new(self.value(a), p, q), if b_transposed { bm.t() } else { bm }, &mut out, false);
        let macs = (p * q * r) as u64;
        self.push(vec![p, r], out, Op::MatMul { a, b, b_transposed, p, q, r }, &[a, b], macs)
    }

    /// Swaps the two axes of a 2-D tensor (materialized copy).
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "transpose")?;
        let out = transpose_buf(self.value(x), rows, cols);
        self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }, &[x], 0)
    }

    // ---- element-wise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b], 0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b], 0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b], 0)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let out = self.value(x).iter().map(|&v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), &[x], 0)
    }

    /// Adds `bias[C]` to every last-axis slice of `x[..., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(bias) != [c] {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} does not match last dim of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias);
        let out = self.value(x).chunks(c).flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb)).collect();
        self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias }, &[x, bias], 0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), &[x], 0)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x], 0)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_f64(self.value(x).len() as f64);
        let s: T = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s / n], Op::Mean(x), &[x], 0)
    }

    // ---- normalization --------------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let xs = self.value(x);
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xs[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..len {
                    let e = (xs[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        self.push(shape, out, Op::Softmax { x, axis }, &[x], 0)
    }

    /// Normalizes each last-axis slice of `x[..., C]` to zero mean and unit
    /// variance, then applies `gain[C]` and `bias[C]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        for (v, what) in [(gain, "gain"), (bias, "bias")] {
            if self.shape(v) != [c] {
                return Err(Error::dim(format!(
                    "layer_norm {what} {:?} does not match last dim of {:?}",
                    self.shape(v),
                    self.shape(x)
                )));
            }
        }
        let (xhat, rstd) = normalize_rows(self.value(x), c, eps);
        let (g, b) = (self.value(gain), self.value(bias));
        let out = xhat.chunks(c).flat_map(|row| (0..c).map(move |j| row[j] * g[j] + b[j])).collect();
        self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias], 0)
    }

    /// Normalizes each channel of `x[C, ...]` over its spatial positions,
    /// then applies per-channel `gain[C]` and `bias[C]`.
    pub fn channel_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        if shape.len() < 2 {
            return Err(Error::dim(format!("channel_norm expects [C, ...], got {shape:?}")));
        }
        for (v, what) in [(gain, "gain"), (bias, "bias")] {
            if self.shape(v) != [c] {
                return Err(Error::dim(format!(
                    "channel_norm {what} {:?} does not match channels of {shape:?}",
                    self.shape(v)
                )));
            }
        }
        let plane = self.value(x).len() / c;
        let (xhat, rstd) = normalize_rows(self.value(x), plane, eps);
        let (g, b) = (self.value(gain), self.value(bias));
        let out = xhat.chunks(plane).enumerate().flat_map(|(ch, row)| row.iter().map(move |&v| v * g[ch] + b[ch])).collect();
        self.push(shape, out, Op::ChannelNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias], 0)
    }

    // ---- spatial --------------------------------------------------------

    /// Cross-correlation of `x[Cin,h,w]` with `weight[Cout,Cin,k,k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let (cin, h, w) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::dim(format!("conv2d input must be [C,h,w], got {s:?}"))),
        };
        let (cout, k) = match self.shape(weight) {
            &[co, ci, k1, k2] if ci == cin && k1 == k2 => (co, k1),
            s => {
                return Err(Error::dim(format!(
                    "conv2d weight {s:?} incompatible with input {:?}",
                    self.shape(x)
                )))
            }
        };
        if k % 2 == 0 {
            return Err(Error::dim(format!("conv2d kernel size {k} must be odd")));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::dim("conv2d stride and dilation must be positive"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim(format!("conv2d bias {:?} for {cout} output channels", self.shape(b))));
            }
        }
        let span = dilation * (k - 1) + 1;
        let out_dim = |n: usize| (n + 2 * padding).checked_sub(span).map(|v| v / stride + 1);
        let (oh, ow) = match (out_dim(h), out_dim(w)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::dim(format!(
                    "conv2d output would be empty for input {h}x{w}, kernel {k}, padding {padding}, dilation {dilation}"
                )))
            }
        };
        let geom = ConvGeom { cin, h, w, k, stride, padding, dilation, oh, ow };
        let mut cols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
        kernels::im2col(self.value(x), &geom, &mut cols);
        let mut out = vec![T::zero(); cout * oh * ow];
        kernels::gemm(
            Mat::new(self.value(weight), cout, geom.col_rows()),
            Mat::new(&cols, geom.col_rows(), geom.col_cols()),
            &mut out,
            false,
        );
        if let Some(b) = bias {
            for (plane, &bv) in out.chunks_mut(oh * ow).zip(self.value(b)) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let macs = (cout * geom.col_rows() * geom.col_cols()) as u64;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(vec![cout, oh, ow], out, Op::Conv2d { x, weight, bias, geom, cout }, &inputs, macs)
    }

    /// Bilinear resize of `x[C,h,w]` to `[C,out_h,out_w]` with half-pixel
    /// sampling (align-corners = false). Only enlarges.
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::dim(format!("bilinear_upsample expects [C,h,w], got {s:?}"))),
        };
        if out_h < h || out_w < w {
            return Err(Error::dim(format!("bilinear_upsample cannot shrink {h}x{w} to {out_h}x{out_w}")));
        }
        let out = kernels::bilinear_forward(self.value(x), c, h, w, out_h, out_w);
        self.push(vec![c, out_h, out_w], out, Op::Upsample { x, c, h, w, oh: out_h, ow: out_w }, &[x], 0)
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim(format!("cannot reshape {:?} to {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape(x), &[x], 0)
    }

    /// The sub-tensor `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}")));
        }
        let (outer, alen, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push(oshape, out, Op::Narrow { x, axis, start, len }, &[x], 0)
    }

    /// Joins tensors along `axis`; all other dims must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("concat along {axis}: {base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let mut oshape = base;
        oshape[axis] = total;
        self.push(oshape, out, Op::Concat { xs: xs.to_vec(), axis }, xs, 0)
    }

    // ---- loss -----------------------------------------------------------

    /// Mean negative log-softmax over classes (axis 0 of `logits[N, P]`) at
    /// every position whose target is not `ignore`. Zero when all positions
    /// are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let (n, p) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != p {
            return Err(Error::dim(format!("cross_entropy: {} targets for {p} positions", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore && t >= n) {
            return Err(Error::Data(format!("target class {bad} outside 0..{n}")));
        }
        let xs = self.value(logits);
        let mut probs = vec![T::zero(); n * p];
        let mut loss = 0.0f64;
        let mut counted = 0;
        for (pos, &t) in targets.iter().enumerate() {
            let max = (0..n).map(|c| xs[c * p + pos]).fold(T::neg_infinity(), T::max);
            let total: T = (0..n).map(|c| (xs[c * p + pos] - max).exp()).sum();
            for c in 0..n {
                probs[c * p + pos] = (xs[c * p + pos] - max).exp() / total;
            }
            if t != ignore {
                loss += (max + total.ln() - xs[t * p + pos]).as_f64();
                counted += 1;
            }
        }
        let value = if counted == 0 { 0.0 } else { loss / counted as f64 };
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), ignore, probs, counted };
        self.push(vec![1], vec![T::from_f64(value)], op, &[logits], 0)
    }

    // ---- backward -------------------------------------------------------

    /// Propagates d(loss)/d(·) to every tracked value recorded before `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.replayed {
            return Err(Error::TapeReplayed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        self.replayed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); n.data.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let tracked = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].data.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, b_transposed, p, q, r } => {
                let gm = Mat::new(g, p, r);
                if tracked(a) {
                    // da = g · bᵀ (or g · b when b was used transposed)
                    let bm = if b_transposed { Mat::new(self.value(b), r, q) } else { Mat::new(self.value(b), q, r).t() };
                    acc(a, &|da| kernels::gemm(gm, bm, da, true));
                }
                if tracked(b) {
                    let am = Mat::new(self.value(a), p, q);
                    if b_transposed {
                        // d(bᵀ) = aᵀ·g, so db = gᵀ·a
                        acc(b, &|db| kernels::gemm(gm.t(), am, db, true));
                    } else {
                        acc(b, &|db| kernels::gemm(am.t(), gm, db, true));
                    }
                }
            }
            &Op::Add(a, b) => {
                acc(a, &|d| add_into(d, g));
                acc(b, &|d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &|d| add_into(d, g));
                acc(b, &|d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &|d| d.iter_mut().zip(g).zip(bv).for_each(|((d, &g), &y)| *d += g * y));
                acc(b, &|d| d.iter_mut().zip(g).zip(av).for_each(|((d, &g), &x)| *d += g * x));
            }
            &Op::Scale(x, s) => acc(x, &|d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * s)),
            &Op::AddBias { x, bias } => {
                acc(x, &|d| add_into(d, g));
                let c = self.value(bias).len();
                acc(bias, &|d| {
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            &Op::Relu(x) => {
                let y = &node.data;
                acc(x, &|d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        if y > T::zero() {
                            *d += g;
                        }
                    }
                })
            }
            &Op::Sum(x) => acc(x, &|d| d.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean(x) => {
                let scale = g[0] / T::from_f64(self.value(x).len() as f64);
                acc(x, &|d| d.iter_mut().for_each(|d| *d += scale))
            }
            &Op::Softmax { x, axis } => {
                let y = &node.data;
                let (outer, len, inner) = kernels::split_axis(&node.shape, axis);
                acc(x, &|d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot: T = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                d[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                })
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = self.value(*gain).len();
                let gv = self.value(*gain);
                acc(*x, &|d| norm_input_grad(d, g, xhat, rstd, c, |_, j| gv[j]));
                acc(*gain, &|d| {
                    for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        d.iter_mut().zip(grow).zip(xrow).for_each(|((d, &g), &xh)| *d += g * xh);
                    }
                });
                acc(*bias, &|d| {
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::ChannelNorm { x, gain, bias, xhat, rstd } => {
                let channels = self.value(*gain).len();
                let plane = node.data.len() / channels;
                let gv = self.value(*gain);
                acc(*x, &|d| norm_input_grad(d, g, xhat, rstd, plane, |row, _| gv[row]));
                acc(*gain, &|d| {
                    for (ch, (grow, xrow)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                        d[ch] += grow.iter().zip(xrow).map(|(&g, &xh)| g * xh).sum();
                    }
                });
                acc(*bias, &|d| {
                    for (ch, row) in g.chunks(plane).enumerate() {
                        d[ch] += row.iter().copied().sum();
                    }
                });
            }
            &Op::Conv2d { x, weight, bias, geom, cout } => {
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let gm = Mat::new(g, cout, cols_n);
                if tracked(weight) {
                    let mut cols = vec![T::zero(); rows * cols_n];
                    kernels::im2col(self.value(x), &geom, &mut cols);
                    acc(weight, &|dw| kernels::gemm(gm, Mat::new(&cols, rows, cols_n).t(), dw, true));
                }
                if tracked(x) {
                    let mut dcols = vec![T::zero(); rows * cols_n];
                    kernels::gemm(Mat::new(self.value(weight), cout, rows).t(), gm, &mut dcols, false);
                    acc(x, &|dx| kernels::col2im_add(&dcols, &geom, dx));
                }
                if let Some(b) = bias {
                    acc(b, &|db| {
                        for (d, plane) in db.iter_mut().zip(g.chunks(cols_n)) {
                            *d += plane.iter().copied().sum();
                        }
                    });
                }
            }
            &Op::Upsample { x, c, h, w, oh, ow } => {
                acc(x, &|dx| add_into(dx, &kernels::bilinear_backward(g, c, h, w, oh, ow)))
            }
            &Op::Reshape(x) => acc(x, &|d| add_into(d, g)),
            &Op::Transpose { x, rows, cols } => acc(x, &|d| add_into(d, &transpose_buf(g, cols, rows))),
            &Op::Narrow { x, axis, start, len } => {
                let (outer, alen, inner) = kernels::split_axis(self.shape(x), axis);
                acc(x, &|d| {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                })
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = kernels::split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    acc(v, &|d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::CrossEntropy { logits, targets, ignore, probs, counted } => {
                if *counted == 0 {
                    return;
                }
                let p = targets.len();
                let n = probs.len() / p;
                let scale = g[0] / T::from_f64(*counted as f64);
                acc(*logits, &|d| {
                    for (pos, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for c in 0..n {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            d[c * p + pos] += scale * (probs[c * p + pos] - onehot);
                        }
                    }
                })
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn transpose_buf<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Per-row standardization; returns (x̂, 1/σ per row).
fn normalize_rows<T: Scalar>(x: &[T], len: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let n = T::from_f64(len as f64);
    let eps = T::from_f64(eps);
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / len);
    for row in x.chunks(len) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        xhat.extend(row.iter().map(|&v| (v - mean) * r));
        rstd.push(r);
    }
    (xhat, rstd)
}

/// dx for y = gain·x̂ + bias, with x̂ standardized along rows of `len`.
fn norm_input_grad<T: Scalar>(
    dx: &mut [T],
    g: &[T],
    xhat: &[T],
    rstd: &[T],
    len: usize,
    gain: impl Fn(usize, usize) -> T,
) {
    let n = T::from_f64(len as f64);
    for (row, ((d, gr), xr)) in dx.chunks_mut(len).zip(g.chunks(len)).zip(xhat.chunks(len)).enumerate() {
        let gxhat: Vec<T> = gr.iter().enumerate().map(|(j, &gv)| gv * gain(row, j)).collect();
        let mean_g = gxhat.iter().copied().sum::<T>() / n;
        let mean_gx = gxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / n;
        for j in 0..len {
            d[j] += rstd[row] * (gxhat[j] - mean_g - xr[j] * mean_gx);
        }
    }
}
