//! Reference spatial-temporal backend over the most recent window: an input
//! projection, three blocks of gated causal temporal convolution (kernel 2,
//! dilations 1, 2, 4) with one-hop graph mixing and residual connections,
//! then a temporal mean collapse and an output head.
//!
//! The hidden state is carried as one N x width matrix per time step, so
//! the temporal convolution is a pair of matmuls per step and the graph
//! mixing is a plain adjacency product.

use crate::error::{LmhrError, Result};
use crate::numerics::nn::{linear, register_linear};
use crate::numerics::optim::{ParamGroup, ParamVars};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// gated-TCN + graph-conv reference backend
    Reference,
    /// no spatial-temporal branch (the linear fusion head remains)
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub d: usize,
    pub width: usize,
    pub n_blocks: usize,
    pub l_s: usize,
    pub n_channels: usize,
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.n_blocks == 0 {
            return Err(LmhrError::config("backend: width and blocks must be >= 1"));
        }
        if self.l_s < 2 {
            return Err(LmhrError::config(format!(
                "backend: window of {} steps is shorter than the kernel",
                self.l_s
            )));
        }
        Ok(())
    }

    fn dilation(&self, block: usize) -> usize {
        1 << block
    }
}

pub fn register<T: Scalar>(group: &mut ParamGroup<T>, cfg: &BackendConfig) {
    register_linear(group, "input", cfg.n_channels, cfg.width);
    for b in 0..cfg.n_blocks {
        for half in ["filter", "gate"] {
            register_linear(group, &format!("block{b}.{half}.tap0"), cfg.width, cfg.width);
            register_linear(group, &format!("block{b}.{half}.tap1"), cfg.width, cfg.width);
        }
        register_linear(group, &format!("block{b}.graph.mix"), cfg.width, cfg.width);
        register_linear(group, &format!("block{b}.graph.self"), cfg.width, cfg.width);
    }
    register_linear(group, "head", cfg.width, cfg.d);
}

/// One-hop graph mixing: Y = rownorm(A) . X . W_mix + X . W_self. The
/// adjacency is row-normalized internally with a 1e-8 floor, so an all-zero
/// row degenerates to the self path alone.
pub fn graph_conv<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
    a: Var,
) -> Result<Var> {
    let (n, _) = tape.value(x).dims2()?;
    let (ar, ac) = tape.value(a).dims2()?;
    if ar != n || ac != n {
        return Err(LmhrError::shape(format!(
            "graph conv: adjacency {ar}x{ac} for {n} nodes"
        )));
    }
    let ones = tape.constant(Tensor::full(vec![n, 1], T::one()))?;
    let row_sum = tape.matmul(a, ones)?;
    let floored = tape.clamp(row_sum, T::of(1e-8), T::infinity())?;
    let a_norm = tape.div(a, floored)?;
    let mixed = tape.matmul(a_norm, x)?;
    let mixed = linear(tape, vars, &format!("{prefix}.mix"), mixed)?;
    let own = linear(tape, vars, &format!("{prefix}.self"), x)?;
    tape.add(mixed, own)
}

/// Gated causal temporal convolution over per-step N x width matrices:
/// out_t = tanh(x_{t-dil} W0 + x_t W1 + b_f) * sigmoid(same with gate
/// weights). Steps before the window start contribute nothing, so output t
/// depends only on inputs <= t.
pub fn gated_tcn_steps<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    xs: &[Var],
    dilation: usize,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(xs.len());
    for t in 0..xs.len() {
        let mut halves = Vec::with_capacity(2);
        for half in ["filter", "gate"] {
            let cur = linear(tape, vars, &format!("{prefix}.{half}.tap1"), xs[t])?;
            let pre = if t >= dilation {
                // tap0 carries the dilated history; its bias is already in tap1's term
                let w0 = vars.get(&format!("{prefix}.{half}.tap0.w"))?;
                let w0t = tape.transpose(w0)?;
                let past = tape.matmul(xs[t - dilation], w0t)?;
                tape.add(cur, past)?
            } else {
                cur
            };
            halves.push(pre);
        }
        let f = tape.tanh(halves[0])?;
        let g = tape.sigmoid(halves[1])?;
        out.push(tape.mul(f, g)?);
    }
    Ok(out)
}

/// Single-series view of the gated TCN: X is L x width (rows = time).
pub fn gated_tcn_series<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
    dilation: usize,
) -> Result<Var> {
    let (l, _) = tape.value(x).dims2()?;
    let steps: Vec<Var> = (0..l)
        .map(|t| tape.row(x, t))
        .collect::<Result<_>>()?;
    let out = gated_tcn_steps(tape, vars, prefix, &steps, dilation)?;
    tape.concat_rows(&out)
}

/// Full backend forward for one batch item. `windows[i]` is node i's most
/// recent segment, L_s x C. `a` is the (soft or binary) adjacency; absent
/// means no spatial mixing.
pub fn stgnn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &BackendConfig,
    windows: &[Tensor<T>],
    a: Option<Var>,
) -> Result<Var> {
    cfg.validate()?;
    let n = windows.len();
    if n == 0 {
        return Err(LmhrError::shape("backend: empty node list"));
    }
    let a = match a {
        Some(v) => v,
        None => tape.constant(Tensor::zeros(vec![n, n]))?,
    };
    // reorganize to per-step N x C matrices and project
    let mut steps = Vec::with_capacity(cfg.l_s);
    for t in 0..cfg.l_s {
        let mut rows = Vec::with_capacity(n);
        for w in windows {
            let (l, c) = w.dims2()?;
            if l != cfg.l_s || c != cfg.n_channels {
                return Err(LmhrError::shape(format!(
                    "backend: window {l}x{c}, expected {}x{}",
                    cfg.l_s, cfg.n_channels
                )));
            }
            let data = w.data()[t * c..(t + 1) * c].to_vec();
            rows.push(tape.constant(Tensor::new(vec![1, c], data)?)?);
        }
        let x_t = tape.concat_rows(&rows)?;
        steps.push(linear(tape, vars, "backend.input", x_t)?);
    }
    for b in 0..cfg.n_blocks {
        let tcn = gated_tcn_steps(
            tape,
            vars,
            &format!("backend.block{b}"),
            &steps,
            cfg.dilation(b),
        )?;
        let mut next = Vec::with_capacity(steps.len());
        for (t, y) in tcn.iter().enumerate() {
            let mixed = graph_conv(tape, vars, &format!("backend.block{b}.graph"), *y, a)?;
            next.push(tape.add(steps[t], mixed)?);
        }
        steps = next;
    }
    // temporal collapse so the node vector sees the whole window
    let mut acc = steps[0];
    for s in &steps[1..] {
        acc = tape.add(acc, *s)?;
    }
    let pooled = tape.scale(acc, T::of(1.0 / cfg.l_s as f64))?;
    linear(tape, vars, "backend.head", pooled)
}
