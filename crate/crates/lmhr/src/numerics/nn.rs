//! Neural building blocks composed from tape ops: linear layers, multi-head
//! self-attention, feed-forward blocks, the transformer layer, dropout and
//! small MLPs.
//!
//! Parameters are addressed by string prefix: `register_*` adds the tensors
//! to a [`ParamGroup`] and the matching forward reads them back from
//! [`ParamVars`] by the same prefix.

use crate::error::{LmhrError, Result};
use crate::numerics::optim::{InitSpec, ParamGroup, ParamVars};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dropout context for training-mode forwards. Absent in eval mode, which
/// makes eval deterministic by construction.
pub struct DropoutCtx<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

pub fn register_linear<T: Scalar>(
    group: &mut ParamGroup<T>,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
) {
    group.add(format!("{prefix}.w"), vec![out_dim, in_dim], InitSpec::XavierUniform);
    group.add(format!("{prefix}.b"), vec![1, out_dim], InitSpec::Zeros);
}

/// y = x . W^T + b for x of shape S x in.
pub fn linear<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = vars.get(&format!("{prefix}.w"))?;
    let b = vars.get(&format!("{prefix}.b"))?;
    let wt = tape.transpose(w)?;
    let xw = tape.matmul(x, wt)?;
    tape.add(xw, b)
}

pub fn register_layer_norm<T: Scalar>(group: &mut ParamGroup<T>, prefix: &str, d: usize) {
    group.add(format!("{prefix}.gamma"), vec![1, d], InitSpec::Ones);
    group.add(format!("{prefix}.beta"), vec![1, d], InitSpec::Zeros);
}

pub fn layer_norm<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gamma = vars.get(&format!("{prefix}.gamma"))?;
    let beta = vars.get(&format!("{prefix}.beta"))?;
    tape.layer_norm(x, gamma, beta, T::of(LAYER_NORM_EPS))
}

/// Inverted-scaling dropout: mask entries with probability `rate`, scale the
/// survivors by 1/(1-rate) so eval mode needs no rescale.
pub fn dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    ctx: &mut DropoutCtx<'_>,
) -> Result<Var> {
    if ctx.rate <= 0.0 {
        return Ok(x);
    }
    if ctx.rate >= 1.0 {
        return Err(LmhrError::config("dropout rate must be in [0, 1)"));
    }
    let shape = tape.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - ctx.rate);
    let data: Vec<T> = (0..shape.iter().product::<usize>())
        .map(|_| {
            if ctx.rng.gen::<f64>() < ctx.rate {
                T::zero()
            } else {
                T::of(keep)
            }
        })
        .collect();
    let mask = tape.constant(Tensor::new(shape, data)?)?;
    tape.mul(x, mask)
}

fn maybe_dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    ctx: &mut Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    match ctx.as_deref_mut() {
        Some(c) => dropout(tape, x, c),
        None => Ok(x),
    }
}

pub fn register_msa<T: Scalar>(group: &mut ParamGroup<T>, prefix: &str, d: usize) {
    for proj in ["wq", "wk", "wv", "wo"] {
        register_linear(group, &format!("{prefix}.{proj}"), d, d);
    }
}

/// Multi-head self-attention over an S x d sequence. Returns the projected
/// output and the per-head attention matrices (S x S, rows sum to 1).
pub fn multi_head_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let (_, d) = tape.value(x).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(LmhrError::config(format!(
            "attention width {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let q = linear(tape, vars, &format!("{prefix}.wq"), x)?;
    let k = linear(tape, vars, &format!("{prefix}.wk"), x)?;
    let v = linear(tape, vars, &format!("{prefix}.wv"), x)?;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scaled)?;
        let oh = tape.matmul(attn, vh)?;
        outs.push(oh);
        attns.push(attn);
    }
    let merged = tape.concat_cols(&outs)?;
    let out = linear(tape, vars, &format!("{prefix}.wo"), merged)?;
    Ok((out, attns))
}

pub fn register_ffn<T: Scalar>(group: &mut ParamGroup<T>, prefix: &str, d: usize, hidden: usize) {
    register_linear(group, &format!("{prefix}.fc1"), d, hidden);
    register_linear(group, &format!("{prefix}.fc2"), hidden, d);
}

pub fn ffn<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, vars, &format!("{prefix}.fc1"), x)?;
    let h = tape.relu(h)?;
    linear(tape, vars, &format!("{prefix}.fc2"), h)
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerLayerCfg {
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl TransformerLayerCfg {
    pub fn new(d: usize, heads: usize) -> Self {
        // hidden width 4d, standard transformer convention
        TransformerLayerCfg {
            d,
            heads,
            ffn_hidden: 4 * d,
        }
    }
}

pub fn register_transformer_layer<T: Scalar>(
    group: &mut ParamGroup<T>,
    prefix: &str,
    cfg: TransformerLayerCfg,
) {
    register_msa(group, &format!("{prefix}.msa"), cfg.d);
    register_layer_norm(group, &format!("{prefix}.ln1"), cfg.d);
    register_ffn(group, &format!("{prefix}.ffn"), cfg.d, cfg.ffn_hidden);
    register_layer_norm(group, &format!("{prefix}.ln2"), cfg.d);
}

/// One post-norm transformer layer:
/// U = LayerNorm(X + MSA(X)), H = LayerNorm(U + FFN(U)).
pub fn transformer_layer<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
    heads: usize,
    mut drop: Option<&mut DropoutCtx<'_>>,
) -> Result<(Var, Vec<Var>)> {
    let (a, attns) = multi_head_self_attention(tape, vars, &format!("{prefix}.msa"), x, heads)?;
    let a = maybe_dropout(tape, a, &mut drop)?;
    let xa = tape.add(x, a)?;
    let u = layer_norm(tape, vars, &format!("{prefix}.ln1"), xa)?;
    let f = ffn(tape, vars, &format!("{prefix}.ffn"), u)?;
    let f = maybe_dropout(tape, f, &mut drop)?;
    let uf = tape.add(u, f)?;
    let h = layer_norm(tape, vars, &format!("{prefix}.ln2"), uf)?;
    Ok((h, attns))
}

/// Register a chain of linear layers with ReLU between them (none after the
/// last): dims = [in, h1, ..., out].
pub fn register_mlp<T: Scalar>(group: &mut ParamGroup<T>, prefix: &str, dims: &[usize]) {
    assert!(dims.len() >= 2, "mlp needs at least in/out dims");
    for i in 0..dims.len() - 1 {
        register_linear(group, &format!("{prefix}.fc{i}"), dims[i], dims[i + 1]);
    }
}

pub fn mlp<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
    n_layers: usize,
) -> Result<Var> {
    let mut h = x;
    for i in 0..n_layers {
        h = linear(tape, vars, &format!("{prefix}.fc{i}"), h)?;
        if i + 1 < n_layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::optim::ParamSet;
    use rand::SeedableRng;

    fn setup_msa(d: usize, seed: u64) -> (ParamSet<f64>, TransformerLayerCfg) {
        let mut group = ParamGroup::new("t");
        let cfg = TransformerLayerCfg::new(d, 4);
        register_transformer_layer(&mut group, "layer", cfg);
        let mut set = ParamSet::new();
        set.push_group(group);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in set.groups.iter_mut() {
            g.init_all(&mut rng);
        }
        (set, cfg)
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let (set, _) = setup_msa(8, 3);
        let mut tape = Tape::<f64>::new();
        let vars = set.load_on_tape(&mut tape).unwrap();
        let x = tape
            .constant(Tensor::from_f64s(vec![1, 8], &[0.3; 8]).unwrap())
            .unwrap();
        let (out, attns) = multi_head_self_attention(&mut tape, &vars, "t.layer.msa", x, 4).unwrap();
        for a in &attns {
            assert_eq!(tape.value(*a).data(), &[1.0]);
        }
        // output equals value projection followed by output projection
        let v = linear(&mut tape, &vars, "t.layer.msa.wv", x).unwrap();
        let expect = linear(&mut tape, &vars, "t.layer.msa.wo", v).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(tape.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_produce_identical_rows() {
        let (set, _) = setup_msa(8, 5);
        let mut tape = Tape::<f64>::new();
        let vars = set.load_on_tape(&mut tape).unwrap();
        let row: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let x = tape
            .constant(Tensor::from_f64s(vec![2, 8], &data).unwrap())
            .unwrap();
        let (out, _) = multi_head_self_attention(&mut tape, &vars, "t.layer.msa", x, 4).unwrap();
        let o = tape.value(out).data();
        for j in 0..8 {
            assert!((o[j] - o[8 + j]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (set, _) = setup_msa(8, 7);
        let mut tape = Tape::<f64>::new();
        let vars = set.load_on_tape(&mut tape).unwrap();
        let data: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape
            .constant(Tensor::from_f64s(vec![5, 8], &data).unwrap())
            .unwrap();
        let (_, attns) = multi_head_self_attention(&mut tape, &vars, "t.layer.msa", x, 4).unwrap();
        for a in attns {
            let av = tape.value(a);
            let (r, c) = av.dims2().unwrap();
            for i in 0..r {
                let s: f64 = av.data()[i * c..(i + 1) * c].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let (set, _) = setup_msa(8, 11);
        let mut tape = Tape::<f64>::new();
        let vars = set.load_on_tape(&mut tape).unwrap();
        let x = tape
            .constant(Tensor::from_f64s(vec![2, 8], &[0.0; 16]).unwrap())
            .unwrap();
        assert!(multi_head_self_attention(&mut tape, &vars, "t.layer.msa", x, 3).is_err());
    }

    #[test]
    fn zero_weight_sublayers_reduce_to_double_layer_norm() {
        let (mut set, _) = setup_msa(8, 13);
        // zero every weight and bias; layer norms stay at gamma=1, beta=0
        for (name, t) in set.iter_mut() {
            if !name.contains("gamma") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut tape = Tape::<f64>::new();
        let vars = set.load_on_tape(&mut tape).unwrap();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.61).cos()).collect();
        let x = tape
            .constant(Tensor::from_f64s(vec![3, 8], &data).unwrap())
            .unwrap();
        let (h, _) = transformer_layer(&mut tape, &vars, "t.layer", x, 4, None).unwrap();
        let ln1 = layer_norm(&mut tape, &vars, "t.layer.ln1", x).unwrap();
        let expect = layer_norm(&mut tape, &vars, "t.layer.ln2", ln1).unwrap();
        for (a, b) in tape.value(h).data().iter().zip(tape.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (set, _) = setup_msa(8, 17);
        let data: Vec<f64> = (0..32).map(|i| (i as f64 * 0.23).sin()).collect();
        let run = || {
            let mut tape = Tape::<f64>::new();
            let vars = set.load_on_tape(&mut tape).unwrap();
            let x = tape
                .constant(Tensor::from_f64s(vec![4, 8], &data).unwrap())
                .unwrap();
            let (h, _) = transformer_layer(&mut tape, &vars, "t.layer", x, 4, None).unwrap();
            tape.value(h).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn paper_scale_shapes_pass_through() {
        // 252 x 96 in -> 252 x 96 out
        let (set, _) = setup_msa(96, 19);
        let mut tape = Tape::<f64>::new();
        let vars = set.load_on_tape(&mut tape).unwrap();
        let data: Vec<f64> = (0..252 * 96).map(|i| ((i % 131) as f64) * 0.01 - 0.6).collect();
        let x = tape
            .constant(Tensor::from_f64s(vec![252, 96], &data).unwrap())
            .unwrap();
        let (out, _) = multi_head_self_attention(&mut tape, &vars, "t.layer.msa", x, 4).unwrap();
        assert_eq!(tape.value(out).shape(), &[252, 96]);
        let (h, _) = transformer_layer(&mut tape, &vars, "t.layer", x, 4, None).unwrap();
        assert_eq!(tape.value(h).shape(), &[252, 96]);
    }

    #[test]
    fn dropout_inverted_scaling_preserves_mean() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .constant(Tensor::full(vec![100, 100], 1.0))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut ctx = DropoutCtx {
            rate: 0.1,
            rng: &mut rng,
        };
        let y = dropout(&mut tape, x, &mut ctx).unwrap();
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }
}
