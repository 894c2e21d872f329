//! Long-history encoder: per-segment temporal embedding with learnable
//! positions, then stacked transformer layers producing context-aware
//! segment representations. Nodes never attend to each other here; each
//! series is encoded independently.

use crate::error::{LmhrError, Result};
use crate::numerics::nn::{
    register_linear, register_transformer_layer, transformer_layer, DropoutCtx,
    TransformerLayerCfg,
};
use crate::numerics::optim::{InitSpec, ParamGroup, ParamVars};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::retriever::RepTensor;
use serde::{Deserialize, Serialize};

pub const ENCODER_LAYERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub l_s: usize,
    pub n_channels: usize,
    /// rows in the positional table; segment counts beyond this are an error
    pub max_p: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(LmhrError::config(format!(
                "encoder: d = {} must be divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if self.l_s == 0 || self.n_channels == 0 || self.max_p == 0 {
            return Err(LmhrError::config("encoder: dims must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LmhrError::config("encoder: dropout must be in [0,1)"));
        }
        Ok(())
    }
}

pub fn register<T: Scalar>(group: &mut ParamGroup<T>, cfg: &EncoderConfig) {
    register_linear(group, "embed", cfg.l_s * cfg.n_channels, cfg.d);
    group.add(
        "pos",
        vec![cfg.max_p, cfg.d],
        InitSpec::Uniform { lo: -0.02, hi: 0.02 },
    );
    for i in 0..ENCODER_LAYERS {
        register_transformer_layer(
            group,
            &format!("layer{i}"),
            TransformerLayerCfg::new(cfg.d, cfg.heads),
        );
    }
}

/// E_j = W . flatten(S_j) + b + p_j for the P segments of one node.
/// `segments` is P x (L_s * C), flattened time-major per segment.
pub fn embed_segments<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &EncoderConfig,
    segments: Var,
) -> Result<Var> {
    let (p, width) = tape.value(segments).dims2()?;
    if width != cfg.l_s * cfg.n_channels {
        return Err(LmhrError::shape(format!(
            "embed: segment width {width} != L_s*C = {}",
            cfg.l_s * cfg.n_channels
        )));
    }
    if p > cfg.max_p {
        return Err(LmhrError::config(format!(
            "embed: {p} segments exceed positional table of {} rows",
            cfg.max_p
        )));
    }
    let e = crate::numerics::nn::linear(tape, vars, "encoder.embed", segments)?;
    let pos = vars.get("encoder.pos")?;
    let pos_p = tape.slice_rows(pos, 0, p)?;
    tape.add(e, pos_p)
}

/// Four stacked transformer layers over the embedded segments.
pub fn encode_context<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &EncoderConfig,
    e: Var,
    mut drop: Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    let mut h = e;
    for i in 0..ENCODER_LAYERS {
        let (out, _) = transformer_layer(
            tape,
            vars,
            &format!("encoder.layer{i}"),
            h,
            cfg.heads,
            drop.as_deref_mut(),
        )?;
        h = out;
    }
    Ok(h)
}

/// Embed then contextualize one node's segments.
pub fn encode_node<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &EncoderConfig,
    segments: Var,
    drop: Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    let e = embed_segments(tape, vars, cfg, segments)?;
    encode_context(tape, vars, cfg, e, drop)
}

/// Encode every (batch, node) slice independently. `segments[b][i]` is the
/// P x (L_s*C) matrix for node i of item b; the same tensor goes onto the
/// tape as a constant leaf. Returns the per-slice tape vars plus the
/// detached representation values for the retriever.
pub fn encode_batch<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &EncoderConfig,
    segments: &[Vec<Tensor<T>>],
    mut drop: Option<&mut DropoutCtx<'_>>,
) -> Result<(Vec<Vec<Var>>, RepTensor)> {
    let b = segments.len();
    if b == 0 || segments[0].is_empty() {
        return Err(LmhrError::shape("encode_batch: empty batch"));
    }
    let n = segments[0].len();
    let (p, _) = segments[0][0].dims2()?;
    let mut h_vars = Vec::with_capacity(b);
    let mut rep = RepTensor::zeros(b, n, p, cfg.d);
    for (bi, item) in segments.iter().enumerate() {
        if item.len() != n {
            return Err(LmhrError::shape("encode_batch: ragged node count"));
        }
        let mut row = Vec::with_capacity(n);
        for (ni, seg) in item.iter().enumerate() {
            let s = tape.constant(seg.clone())?;
            let h = encode_node(tape, vars, cfg, s, drop.as_deref_mut())?;
            let hv = tape.value(h);
            for j in 0..p {
                let rep_j: Vec<f64> = hv.data()[j * cfg.d..(j + 1) * cfg.d]
                    .iter()
                    .map(|x| x.as_f64())
                    .collect();
                rep.set_segment(bi, ni, j, &rep_j);
            }
            row.push(h);
        }
        h_vars.push(row);
    }
    Ok((h_vars, rep))
}
