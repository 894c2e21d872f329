//! Reverse-mode autodiff over rank-2 tensors.
//!
//! Every differentiable value lives on a [`Tape`] as a node holding its
//! forward value and the op that produced it. `backward` replays the tape in
//! reverse, accumulating gradients in a fixed order so runs are bit-identical
//! given identical inputs.
//!
//! The op set is exactly what the model needs; all tensors on the tape are
//! rank-2 (vectors are 1 x d rows). Forward outputs are checked for NaN/Inf
//! by default: a non-finite value is an error state, not a value.

use crate::error::{LmhrError, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Abs(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Clamp(Var, T, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        dilation: usize,
        left_pad: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-variable gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

// broadcast compatibility for elementwise binary ops:
// each dim must match or be 1 on one side
fn broadcast_out(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let r = if a.0 == b.0 {
        a.0
    } else if a.0 == 1 {
        b.0
    } else if b.0 == 1 {
        a.0
    } else {
        return None;
    };
    let c = if a.1 == b.1 {
        a.1
    } else if a.1 == 1 {
        b.1
    } else if b.1 == 1 {
        a.1
    } else {
        return None;
    };
    Some((r, c))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Insert a constant (no gradient tracking).
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Insert a leaf that accumulates gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, true)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if value.rank() != 2 {
            return Err(LmhrError::shape(format!(
                "{name}: tape tensors are rank-2, got {:?}",
                value.shape()
            )));
        }
        if self.check_finite && !value.is_finite() {
            return Err(LmhrError::numeric(format!("{name}: non-finite output")));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary_elementwise(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (or, oc) = broadcast_out((ar, ac), (br, bc)).ok_or_else(|| {
            LmhrError::shape(format!("{name}: cannot broadcast {ar}x{ac} with {br}x{bc}"))
        })?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(or * oc);
        for i in 0..or {
            let ai = if ar == 1 { 0 } else { i };
            let bi = if br == 1 { 0 } else { i };
            for j in 0..oc {
                let aj = if ac == 1 { 0 } else { j };
                let bj = if bc == 1 { 0 } else { j };
                out.push(f(av[ai * ac + aj], bv[bi * bc + bj]));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(name, Tensor::new(vec![or, oc], out)?, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(
        &mut self,
        name: &str,
        a: Var,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let value = self.value(a);
        let out = Tensor::new(
            value.shape().to_vec(),
            value.data().iter().map(|&x| f(x)).collect(),
        )?;
        let rg = self.rg(a);
        self.push(name, out, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, |x| x.abs(), Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            a,
            |x| T::one() / (T::one() + (-x).exp()),
            Op::Sigmoid(a),
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(LmhrError::numeric("ln: non-positive input"));
        }
        self.unary("ln", a, |x| x.ln(), Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a, c))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(
            "clamp",
            a,
            |x| {
                if x < lo {
                    lo
                } else if x > hi {
                    hi
                } else {
                    x
                }
            },
            Op::Clamp(a, lo, hi),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(LmhrError::shape(format!(
                "matmul: inner dims {k} vs {k2} (shapes {m}x{k}, {k2}x{n})"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let av = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshape(vec![rows, cols])?;
        let rg = self.rg(a);
        self.push("reshape", value, Op::Reshape(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(LmhrError::shape("concat_rows: empty input"));
        }
        let (_, c) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(LmhrError::shape(format!(
                    "concat_rows: column mismatch {pc} vs {c}"
                )));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat_rows",
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(LmhrError::shape("concat_cols: empty input"));
        }
        let (r, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(LmhrError::shape(format!(
                    "concat_cols: row mismatch {pr} vs {r}"
                )));
            }
            widths.push(pc);
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                let pv = self.value(p).data();
                data.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat_cols",
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if start + len > r {
            return Err(LmhrError::shape(format!(
                "slice_rows: [{start}, {}) out of {r} rows",
                start + len
            )));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        self.push(
            "slice_rows",
            Tensor::new(vec![len, c], data)?,
            Op::SliceRows(a, start),
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if start + len > c {
            return Err(LmhrError::shape(format!(
                "slice_cols: [{start}, {}) out of {c} cols",
                start + len
            )));
        }
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        self.push(
            "slice_cols",
            Tensor::new(vec![r, len], data)?,
            Op::SliceCols(a, start),
            rg,
        )
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &idx in indices {
            if idx >= r {
                return Err(LmhrError::shape(format!(
                    "gather_rows: index {idx} out of {r} rows"
                )));
            }
            data.extend_from_slice(&av[idx * c..(idx + 1) * c]);
        }
        let rg = self.rg(a);
        self.push(
            "gather_rows",
            Tensor::new(vec![indices.len(), c], data)?,
            Op::GatherRows(a, indices.to_vec()),
            rg,
        )
    }

    /// Row of a rank-2 tensor as a 1 x c value.
    pub fn row(&mut self, a: Var, idx: usize) -> Result<Var> {
        self.slice_rows(a, idx, 1)
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if c == 0 {
            return Err(LmhrError::shape("softmax: empty axis"));
        }
        let av = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let rowv = &av[i * c..(i + 1) * c];
            let mut mx = rowv[0];
            for &x in rowv.iter() {
                if x > mx {
                    mx = x;
                }
            }
            let mut sum = T::zero();
            for j in 0..c {
                let e = (rowv[j] - mx).exp();
                out[i * c + j] = e;
                sum = sum + e;
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / sum;
            }
        }
        let rg = self.rg(a);
        self.push(
            "softmax",
            Tensor::new(vec![r, c], out)?,
            Op::SoftmaxRows(a),
            rg,
        )
    }

    /// Layer normalization over each row; gamma and beta are 1 x d.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (r, d) = self.value(x).dims2()?;
        if d == 0 {
            return Err(LmhrError::shape("layer_norm: zero-width rows"));
        }
        if eps <= T::zero() {
            return Err(LmhrError::config("layer_norm: eps must be > 0"));
        }
        let (gr, gc) = self.value(gamma).dims2()?;
        let (br, bc) = self.value(beta).dims2()?;
        if gr != 1 || gc != d || br != 1 || bc != d {
            return Err(LmhrError::shape(format!(
                "layer_norm: gamma/beta must be 1x{d}, got {gr}x{gc} and {br}x{bc}"
            )));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let dn = T::of(d as f64);
        let mut out = vec![T::zero(); r * d];
        for i in 0..r {
            let rowv = &xv[i * d..(i + 1) * d];
            let mut mean = T::zero();
            for &v in rowv {
                mean = mean + v;
            }
            mean = mean / dn;
            let mut var = T::zero();
            for &v in rowv {
                let dvi = v - mean;
                var = var + dvi * dvi;
            }
            var = var / dn;
            let inv_std = T::one() / (var + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = (rowv[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "layer_norm",
            Tensor::new(vec![r, d], out)?,
            Op::LayerNorm { x, gamma, beta, eps },
            rg,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let mut s = T::zero();
        for &x in self.value(a).data() {
            s = s + x;
        }
        let rg = self.rg(a);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let mut s = T::zero();
        for &x in self.value(a).data() {
            s = s + x;
        }
        let m = s / T::of(n as f64);
        let rg = self.rg(a);
        self.push("mean_all", Tensor::scalar(m), Op::MeanAll(a), rg)
    }

    /// Column means: r x c -> 1 x c.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let av = self.value(a).data();
        let rn = T::of(r as f64);
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] = out[j] + av[i * c + j];
            }
        }
        for v in out.iter_mut() {
            *v = *v / rn;
        }
        let rg = self.rg(a);
        self.push("mean_rows", Tensor::new(vec![1, c], out)?, Op::MeanRows(a), rg)
    }

    /// 1-D convolution along the row axis. `x` is L x C_in (rows = time),
    /// `w` is C_out x (C_in * kernel), `b` is 1 x C_out. The input is
    /// left-padded with `left_pad` zero rows; output length is
    /// L + left_pad - dilation * (kernel - 1). With left_pad =
    /// dilation * (kernel - 1) the op is causal and length-preserving.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        dilation: usize,
        left_pad: usize,
    ) -> Result<Var> {
        let (l, c_in) = self.value(x).dims2()?;
        let (c_out, wk) = self.value(w).dims2()?;
        if wk != c_in * kernel {
            return Err(LmhrError::shape(format!(
                "conv1d: weight cols {wk} != c_in*kernel {}",
                c_in * kernel
            )));
        }
        let (br, bc) = self.value(b).dims2()?;
        if br != 1 || bc != c_out {
            return Err(LmhrError::shape(format!(
                "conv1d: bias must be 1x{c_out}, got {br}x{bc}"
            )));
        }
        let span = dilation * (kernel - 1);
        if l + left_pad < span + 1 {
            return Err(LmhrError::config(format!(
                "conv1d: input length {l} (+pad {left_pad}) shorter than receptive span {}",
                span + 1
            )));
        }
        let l_out = l + left_pad - span;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); l_out * c_out];
        for t in 0..l_out {
            for co in 0..c_out {
                let mut acc = bv[co];
                for j in 0..kernel {
                    let u = t + j * dilation;
                    if u < left_pad {
                        continue; // zero padding
                    }
                    let src = u - left_pad;
                    for ci in 0..c_in {
                        acc = acc + xv[src * c_in + ci] * wv[co * wk + ci * kernel + j];
                    }
                }
                out[t * c_out + co] = acc;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            "conv1d",
            Tensor::new(vec![l_out, c_out], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                dilation,
                left_pad,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// grad-requiring node reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(LmhrError::shape(format!(
                "backward: loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(
            self.value(loss).shape().to_vec(),
            T::one(),
        ));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_into(&self, grads: &mut Vec<Option<Tensor<T>>>, v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(delta.data().iter()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reduce a full-size gradient back onto a (possibly broadcast) operand.
    fn reduce_to(&self, g: &Tensor<T>, target: Var) -> Result<Tensor<T>> {
        let (gr, gc) = g.dims2()?;
        let (tr, tc) = self.value(target).dims2()?;
        if (gr, gc) == (tr, tc) {
            return Ok(g.clone());
        }
        let gv = g.data();
        let mut out = vec![T::zero(); tr * tc];
        for i in 0..gr {
            let ti = if tr == 1 { 0 } else { i };
            for j in 0..gc {
                let tj = if tc == 1 { 0 } else { j };
                out[ti * tc + tj] = out[ti * tc + tj] + gv[i * gc + j];
            }
        }
        Tensor::new(vec![tr, tc], out)
    }

    /// Expand an operand's values to the broadcast output shape.
    fn expand_to(&self, v: Var, rows: usize, cols: usize) -> Result<Vec<T>> {
        let (r, c) = self.value(v).dims2()?;
        let data = self.value(v).data();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let si = if r == 1 { 0 } else { i };
            for j in 0..cols {
                let sj = if c == 1 { 0 } else { j };
                out.push(data[si * c + sj]);
            }
        }
        Ok(out)
    }

    fn accumulate(
        &self,
        id: usize,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<()> {
        let out_val = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let da = self.reduce_to(g, *a)?;
                let db = self.reduce_to(g, *b)?;
                self.add_into(grads, *a, da);
                self.add_into(grads, *b, db);
            }
            Op::Sub(a, b) => {
                let da = self.reduce_to(g, *a)?;
                let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|&x| -x).collect())?;
                let db = self.reduce_to(&neg, *b)?;
                self.add_into(grads, *a, da);
                self.add_into(grads, *b, db);
            }
            Op::Mul(a, b) => {
                let (r, c) = g.dims2()?;
                let ae = self.expand_to(*a, r, c)?;
                let be = self.expand_to(*b, r, c)?;
                let da_full = Tensor::new(
                    vec![r, c],
                    g.data().iter().zip(be.iter()).map(|(&gg, &bb)| gg * bb).collect(),
                )?;
                let db_full = Tensor::new(
                    vec![r, c],
                    g.data().iter().zip(ae.iter()).map(|(&gg, &aa)| gg * aa).collect(),
                )?;
                let da = self.reduce_to(&da_full, *a)?;
                let db = self.reduce_to(&db_full, *b)?;
                self.add_into(grads, *a, da);
                self.add_into(grads, *b, db);
            }
            Op::Div(a, b) => {
                let (r, c) = g.dims2()?;
                let ae = self.expand_to(*a, r, c)?;
                let be = self.expand_to(*b, r, c)?;
                let da_full = Tensor::new(
                    vec![r, c],
                    g.data().iter().zip(be.iter()).map(|(&gg, &bb)| gg / bb).collect(),
                )?;
                let db_full = Tensor::new(
                    vec![r, c],
                    g.data()
                        .iter()
                        .zip(ae.iter().zip(be.iter()))
                        .map(|(&gg, (&aa, &bb))| -gg * aa / (bb * bb))
                        .collect(),
                )?;
                let da = self.reduce_to(&da_full, *a)?;
                let db = self.reduce_to(&db_full, *b)?;
                self.add_into(grads, *a, da);
                self.add_into(grads, *b, db);
            }
            Op::Neg(a) => {
                let da = Tensor::new(g.shape().to_vec(), g.data().iter().map(|&x| -x).collect())?;
                self.add_into(grads, *a, da);
            }
            Op::Abs(a) => {
                let xv = self.value(*a).data();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xv.iter())
                        .map(|(&gg, &x)| {
                            if x > T::zero() {
                                gg
                            } else if x < T::zero() {
                                -gg
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                )?;
                self.add_into(grads, *a, da);
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xv.iter())
                        .map(|(&gg, &x)| if x > T::zero() { gg } else { T::zero() })
                        .collect(),
                )?;
                self.add_into(grads, *a, da);
            }
            Op::Tanh(a) => {
                let yv = out_val.data();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(yv.iter())
                        .map(|(&gg, &y)| gg * (T::one() - y * y))
                        .collect(),
                )?;
                self.add_into(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let yv = out_val.data();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(yv.iter())
                        .map(|(&gg, &y)| gg * y * (T::one() - y))
                        .collect(),
                )?;
                self.add_into(grads, *a, da);
            }
            Op::Exp(a) => {
                let yv = out_val.data();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(yv.iter()).map(|(&gg, &y)| gg * y).collect(),
                )?;
                self.add_into(grads, *a, da);
            }
            Op::Ln(a) => {
                let xv = self.value(*a).data();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(xv.iter()).map(|(&gg, &x)| gg / x).collect(),
                )?;
                self.add_into(grads, *a, da);
            }
            Op::Sqrt(a) => {
                let yv = out_val.data();
                let two = T::of(2.0);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(yv.iter())
                        .map(|(&gg, &y)| gg / (two * y))
                        .collect(),
                )?;
                self.add_into(grads, *a, da);
            }
            Op::Scale(a, c) => {
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|&x| x * *c).collect(),
                )?;
                self.add_into(grads, *a, da);
            }
            Op::AddScalar(a, _) => {
                self.add_into(grads, *a, g.clone());
            }
            Op::Clamp(a, lo, hi) => {
                let xv = self.value(*a).data();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xv.iter())
                        .map(|(&gg, &x)| if x > *lo && x < *hi { gg } else { T::zero() })
                        .collect(),
                )?;
                self.add_into(grads, *a, da);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                // dA = g . B^T ; dB = A^T . g
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                let mut bt = vec![T::zero(); k * n];
                for i in 0..k {
                    for j in 0..n {
                        bt[j * k + i] = bv[i * n + j];
                    }
                }
                let da = matmul_raw(g.data(), &bt, m, n, k);
                let mut at = vec![T::zero(); m * k];
                for i in 0..m {
                    for j in 0..k {
                        at[j * m + i] = av[i * k + j];
                    }
                }
                let db = matmul_raw(&at, g.data(), k, m, n);
                self.add_into(grads, *a, Tensor::new(vec![m, k], da)?);
                self.add_into(grads, *b, Tensor::new(vec![k, n], db)?);
            }
            Op::Transpose(a) => {
                let (gr, gc) = g.dims2()?;
                let gv = g.data();
                let mut da = vec![T::zero(); gr * gc];
                for i in 0..gr {
                    for j in 0..gc {
                        da[j * gr + i] = gv[i * gc + j];
                    }
                }
                self.add_into(grads, *a, Tensor::new(vec![gc, gr], da)?);
            }
            Op::Reshape(a) => {
                let da = g.clone().reshape(self.value(*a).shape().to_vec())?;
                self.add_into(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let gv = g.data();
                let (_, c) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (pr, _) = self.value(p).dims2()?;
                    let slice = gv[offset * c..(offset + pr) * c].to_vec();
                    self.add_into(grads, p, Tensor::new(vec![pr, c], slice)?);
                    offset += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, _) = g.dims2()?;
                let gv = g.data();
                let total: usize = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (_, pc) = self.value(p).dims2()?;
                    let mut slice = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        slice.extend_from_slice(&gv[i * total + offset..i * total + offset + pc]);
                    }
                    self.add_into(grads, p, Tensor::new(vec![r, pc], slice)?);
                    offset += pc;
                }
            }
            Op::SliceRows(a, start) => {
                let (ar, ac) = self.value(*a).dims2()?;
                let (gr, _) = g.dims2()?;
                let mut da = vec![T::zero(); ar * ac];
                let gv = g.data();
                for i in 0..gr {
                    for j in 0..ac {
                        da[(start + i) * ac + j] = gv[i * ac + j];
                    }
                }
                self.add_into(grads, *a, Tensor::new(vec![ar, ac], da)?);
            }
            Op::SliceCols(a, start) => {
                let (ar, ac) = self.value(*a).dims2()?;
                let (gr, gc) = g.dims2()?;
                let mut da = vec![T::zero(); ar * ac];
                let gv = g.data();
                for i in 0..gr {
                    for j in 0..gc {
                        da[i * ac + start + j] = gv[i * gc + j];
                    }
                }
                self.add_into(grads, *a, Tensor::new(vec![ar, ac], da)?);
            }
            Op::GatherRows(a, indices) => {
                let (ar, ac) = self.value(*a).dims2()?;
                let mut da = vec![T::zero(); ar * ac];
                let gv = g.data();
                for (i, &idx) in indices.iter().enumerate() {
                    for j in 0..ac {
                        da[idx * ac + j] = da[idx * ac + j] + gv[i * ac + j];
                    }
                }
                self.add_into(grads, *a, Tensor::new(vec![ar, ac], da)?);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = g.dims2()?;
                let sv = out_val.data();
                let gv = g.data();
                let mut da = vec![T::zero(); r * c];
                for i in 0..r {
                    let mut dot = T::zero();
                    for j in 0..c {
                        dot = dot + gv[i * c + j] * sv[i * c + j];
                    }
                    for j in 0..c {
                        da[i * c + j] = sv[i * c + j] * (gv[i * c + j] - dot);
                    }
                }
                self.add_into(grads, *a, Tensor::new(vec![r, c], da)?);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, d) = self.value(*x).dims2()?;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let grad = g.data();
                let dn = T::of(d as f64);
                let mut dx = vec![T::zero(); r * d];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for i in 0..r {
                    let rowx = &xv[i * d..(i + 1) * d];
                    let rowg = &grad[i * d..(i + 1) * d];
                    let mut mean = T::zero();
                    for &v in rowx {
                        mean = mean + v;
                    }
                    mean = mean / dn;
                    let mut var = T::zero();
                    for &v in rowx {
                        let dv = v - mean;
                        var = var + dv * dv;
                    }
                    var = var / dn;
                    let inv_std = T::one() / (var + *eps).sqrt();
                    let mut dxhat = vec![T::zero(); d];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        let xhat = (rowx[j] - mean) * inv_std;
                        dgamma[j] = dgamma[j] + rowg[j] * xhat;
                        dbeta[j] = dbeta[j] + rowg[j];
                        let dh = rowg[j] * gv[j];
                        dxhat[j] = dh;
                        sum_dxhat = sum_dxhat + dh;
                        sum_dxhat_xhat = sum_dxhat_xhat + dh * xhat;
                    }
                    for j in 0..d {
                        let xhat = (rowx[j] - mean) * inv_std;
                        dx[i * d + j] =
                            inv_std / dn * (dn * dxhat[j] - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                self.add_into(grads, *x, Tensor::new(vec![r, d], dx)?);
                self.add_into(grads, *gamma, Tensor::new(vec![1, d], dgamma)?);
                self.add_into(grads, *beta, Tensor::new(vec![1, d], dbeta)?);
            }
            Op::SumAll(a) => {
                let gg = g.data()[0];
                let shape = self.value(*a).shape().to_vec();
                self.add_into(grads, *a, Tensor::full(shape, gg));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                let gg = g.data()[0] / T::of(n as f64);
                let shape = self.value(*a).shape().to_vec();
                self.add_into(grads, *a, Tensor::full(shape, gg));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).dims2()?;
                let rn = T::of(r as f64);
                let gv = g.data();
                let mut da = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = gv[j] / rn;
                    }
                }
                self.add_into(grads, *a, Tensor::new(vec![r, c], da)?);
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                dilation,
                left_pad,
            } => {
                let (l, c_in) = self.value(*x).dims2()?;
                let (c_out, wk) = self.value(*w).dims2()?;
                let (l_out, _) = g.dims2()?;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let gv = g.data();
                let mut dx = vec![T::zero(); l * c_in];
                let mut dw = vec![T::zero(); c_out * wk];
                let mut db = vec![T::zero(); c_out];
                for t in 0..l_out {
                    for co in 0..c_out {
                        let gg = gv[t * c_out + co];
                        db[co] = db[co] + gg;
                        for j in 0..*kernel {
                            let u = t + j * dilation;
                            if u < *left_pad {
                                continue;
                            }
                            let src = u - left_pad;
                            for ci in 0..c_in {
                                dx[src * c_in + ci] =
                                    dx[src * c_in + ci] + gg * wv[co * wk + ci * kernel + j];
                                dw[co * wk + ci * kernel + j] =
                                    dw[co * wk + ci * kernel + j] + gg * xv[src * c_in + ci];
                            }
                        }
                    }
                }
                self.add_into(grads, *x, Tensor::new(vec![l, c_in], dx)?);
                self.add_into(grads, *w, Tensor::new(vec![c_out, wk], dw)?);
                self.add_into(grads, *b, Tensor::new(vec![1, c_out], db)?);
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
    c
}
