//! Transformer aggregator: project the node's own segment representations,
//! append a learnable target token and the retrieved segment tokens (each
//! offset by its ranking position embedding), run one transformer layer, and
//! read the target slot through an output projection.
//!
//! Sequence layout for P history segments and K_s retrieved tokens
//! (0-based): history occupies 0..P-1, the target token sits at slot P, the
//! retrieved tokens fill P+1..P+K_s. Under the published defaults (P = 252,
//! K_s = 10) the target is the 253rd element and retrieved tokens are
//! elements 254-263, 1-based.

use crate::error::{LmhrError, Result};
use crate::numerics::nn::{
    linear, register_linear, register_transformer_layer, transformer_layer, DropoutCtx,
    TransformerLayerCfg,
};
use crate::numerics::optim::{InitSpec, ParamGroup, ParamVars};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub d: usize,
    pub heads: usize,
    pub k_s: usize,
    pub dropout: f64,
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(LmhrError::config(format!(
                "aggregator: d = {} must be divisible by heads = {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

pub fn register<T: Scalar>(group: &mut ParamGroup<T>, cfg: &AggregatorConfig) {
    register_linear(group, "proj", cfg.d, cfg.d);
    group.add("target", vec![1, cfg.d], InitSpec::TruncNormal { std: 0.02 });
    if cfg.k_s > 0 {
        group.add(
            "ranks",
            vec![cfg.k_s, cfg.d],
            InitSpec::Uniform { lo: -0.02, hi: 0.02 },
        );
    }
    register_transformer_layer(group, "layer", TransformerLayerCfg::new(cfg.d, cfg.heads));
    register_linear(group, "out", cfg.d, cfg.d);
}

/// G_j = W_g . H_j + b_g, row-wise over the node's segments.
pub fn project_segments<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    h: Var,
) -> Result<Var> {
    linear(tape, vars, "aggregator.proj", h)
}

/// Assemble the aggregator input sequence. Retrieved representations are
/// rows (1 x d) in retrieval-rank order; they pass through the same shared
/// projection as the node's own history before the rank embedding is added.
pub fn build_agg_input<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &AggregatorConfig,
    h: Var,
    retrieved: &[Var],
) -> Result<Var> {
    if retrieved.len() != cfg.k_s {
        return Err(LmhrError::config(format!(
            "aggregator: {} retrieved tokens for K_s = {}",
            retrieved.len(),
            cfg.k_s
        )));
    }
    let g = project_segments(tape, vars, h)?;
    let target = vars.get("aggregator.target")?;
    let mut parts = vec![g, target];
    if cfg.k_s > 0 {
        let ranks = vars.get("aggregator.ranks")?;
        let stacked = tape.concat_rows(retrieved)?;
        let projected = project_segments(tape, vars, stacked)?;
        let tokens = tape.add(projected, ranks)?;
        parts.push(tokens);
    }
    tape.concat_rows(&parts)
}

/// Per-head and head-averaged attention from the target slot, extracted
/// from a forward pass for inspection dumps.
#[derive(Debug, Clone)]
pub struct AttentionProbe {
    pub per_head: Vec<Vec<f64>>,
    pub averaged: Vec<f64>,
    pub target_slot: usize,
}

/// Run the single transformer layer and project the target-slot hidden
/// state: AO = W_o . transformer(AI)[P] + b_o.
pub fn aggregate<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &AggregatorConfig,
    ai: Var,
    drop: Option<&mut DropoutCtx<'_>>,
) -> Result<(Var, AttentionProbe)> {
    let (s, _) = tape.value(ai).dims2()?;
    let target_slot = s - 1 - cfg.k_s;
    let (hidden, attns) = transformer_layer(tape, vars, "aggregator.layer", ai, cfg.heads, drop)?;
    let target_state = tape.row(hidden, target_slot)?;
    let ao = linear(tape, vars, "aggregator.out", target_state)?;

    let mut per_head = Vec::with_capacity(attns.len());
    let mut averaged = vec![0.0f64; s];
    for a in &attns {
        let row: Vec<f64> = tape.value(*a).data()[target_slot * s..(target_slot + 1) * s]
            .iter()
            .map(|x| x.as_f64())
            .collect();
        for (acc, v) in averaged.iter_mut().zip(row.iter()) {
            *acc += v / attns.len() as f64;
        }
        per_head.push(row);
    }
    Ok((
        ao,
        AttentionProbe {
            per_head,
            averaged,
            target_slot,
        },
    ))
}

/// Full aggregator forward for one node.
pub fn forward_node<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &AggregatorConfig,
    h: Var,
    retrieved: &[Var],
    drop: Option<&mut DropoutCtx<'_>>,
) -> Result<(Var, AttentionProbe)> {
    let ai = build_agg_input(tape, vars, cfg, h, retrieved)?;
    aggregate(tape, vars, cfg, ai, drop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{grad_check_sampled, random_tensor};
    use crate::numerics::optim::ParamSet;
    use crate::numerics::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg_small(k_s: usize) -> AggregatorConfig {
        AggregatorConfig {
            d: 8,
            heads: 4,
            k_s,
            dropout: 0.0,
        }
    }

    fn init_params(cfg: &AggregatorConfig, seed: u64) -> ParamSet<f64> {
        let mut g = ParamGroup::new("aggregator");
        register(&mut g, cfg);
        let mut set = ParamSet::new();
        set.push_group(g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for gr in set.groups.iter_mut() {
            gr.init_all(&mut rng);
        }
        set
    }

    fn eye(d: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            t.data_mut()[i * d + i] = 1.0;
        }
        t
    }

    #[test]
    fn identity_projection_passes_history_through() {
        let cfg = cfg_small(0);
        let mut set = init_params(&cfg, 1);
        for (name, t) in set.iter_mut() {
            if name == "aggregator.proj.w" {
                *t = eye(8);
            } else if name == "aggregator.proj.b" {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut tape = Tape::<f64>::new();
        let vars = set.load_on_tape(&mut tape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = tape.constant(random_tensor(vec![4, 8], 1.0, &mut rng)).unwrap();
        let g = project_segments(&mut tape, &vars, h).unwrap();
        assert_eq!(tape.value(g).data(), tape.value(h).data());
    }

    #[test]
    fn zero_projection_yields_bias_rows() {
        let cfg = cfg_small(0);
        let mut set = init_params(&cfg, 3);
        for (name, t) in set.iter_mut() {
            if name == "aggregator.proj.w" {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            } else if name == "aggregator.proj.b" {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = i as f64 * 0.1;
                }
            }
        }
        let mut tape = Tape::<f64>::new();
        let vars = set.load_on_tape(&mut tape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = tape.constant(random_tensor(vec![3, 8], 1.0, &mut rng)).unwrap();
        let g = project_segments(&mut tape, &vars, h).unwrap();
        for i in 0..3 {
            for k in 0..8 {
                assert!((tape.value(g).at2(i, k) - k as f64 * 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sequence_length_bookkeeping_matches_paper_defaults() {
        let cfg = AggregatorConfig {
            d: 96,
            heads: 4,
            k_s: 10,
            dropout: 0.1,
        };
        let set = init_params(&cfg, 5);
        let mut tape = Tape::<f64>::new();
        let vars = set.load_on_tape(&mut tape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = tape
            .constant(random_tensor(vec![252, 96], 0.3, &mut rng))
            .unwrap();
        let retrieved: Vec<Var> = (0..10)
            .map(|_| {
                let t = random_tensor(vec![1, 96], 0.3, &mut rng);
                tape.constant(t).unwrap()
            })
            .collect();
        let ai = build_agg_input(&mut tape, &vars, &cfg, h, &retrieved).unwrap();
        assert_eq!(tape.value(ai).shape(), &[263, 96]);
        let (ao, probe) = aggregate(&mut tape, &vars, &cfg, ai, None).unwrap();
        assert_eq!(tape.value(ao).shape(), &[1, 96]);
        // target is the 253rd element 1-based, i.e. slot 252
        assert_eq!(probe.target_slot, 252);
        assert_eq!(probe.averaged.len(), 263);
        let sum: f64 = probe.averaged.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn no_retrieved_tokens_degenerates_to_history_plus_target() {
        let cfg = cfg_small(0);
        let set = init_params(&cfg, 7);
        let mut tape = Tape::<f64>::new();
        let vars = set.load_on_tape(&mut tape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = tape.constant(random_tensor(vec![5, 8], 1.0, &mut rng)).unwrap();
        let ai = build_agg_input(&mut tape, &vars, &cfg, h, &[]).unwrap();
        assert_eq!(tape.value(ai).shape(), &[6, 8]);
    }

    #[test]
    fn wrong_rank_count_is_a_config_error() {
        let cfg = cfg_small(3);
        let set = init_params(&cfg, 9);
        let mut tape = Tape::<f64>::new();
        let vars = set.load_on_tape(&mut tape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = tape.constant(random_tensor(vec![4, 8], 1.0, &mut rng)).unwrap();
        let one = tape.constant(random_tensor(vec![1, 8], 1.0, &mut rng)).unwrap();
        assert!(build_agg_input(&mut tape, &vars, &cfg, h, &[one]).is_err());
    }

    fn run_ao(
        set: &ParamSet<f64>,
        cfg: &AggregatorConfig,
        h_data: &Tensor<f64>,
        retrieved: &[Tensor<f64>],
    ) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let vars = set.load_on_tape(&mut tape).unwrap();
        let h = tape.constant(h_data.clone()).unwrap();
        let rv: Vec<Var> = retrieved
            .iter()
            .map(|t| tape.constant(t.clone()).unwrap())
            .collect();
        let (ao, _) = forward_node(&mut tape, &vars, cfg, h, &rv, None).unwrap();
        tape.value(ao).data().to_vec()
    }

    #[test]
    fn rank_embeddings_carry_the_ordering_signal() {
        let cfg = cfg_small(2);
        let set = init_params(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = random_tensor(vec![4, 8], 1.0, &mut rng);
        let r0 = random_tensor(vec![1, 8], 1.0, &mut rng);
        let r1 = random_tensor(vec![1, 8], 1.0, &mut rng);

        let base = run_ao(&set, &cfg, &h, &[r0.clone(), r1.clone()]);
        // swapping retrieved reps without their rank embeddings changes AO
        let swapped = run_ao(&set, &cfg, &h, &[r1.clone(), r0.clone()]);
        let diff: f64 = base
            .iter()
            .zip(swapped.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-8, "AO ignored retrieval order");

        // swapping reps and rank embeddings together permutes tokens only;
        // the target slot is fixed, so AO is unchanged up to fp reordering
        let mut set2 = set.clone();
        for (name, t) in set2.iter_mut() {
            if name == "aggregator.ranks" {
                let d = 8;
                let row0: Vec<f64> = t.data()[0..d].to_vec();
                let row1: Vec<f64> = t.data()[d..2 * d].to_vec();
                t.data_mut()[0..d].copy_from_slice(&row1);
                t.data_mut()[d..2 * d].copy_from_slice(&row0);
            }
        }
        let both = run_ao(&set2, &cfg, &h, &[r1, r0]);
        for (a, b) in base.iter().zip(both.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn zeroing_retrieved_tokens_changes_ao() {
        let cfg = cfg_small(2);
        let set = init_params(&cfg, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let h = random_tensor(vec![4, 8], 1.0, &mut rng);
        let r0 = random_tensor(vec![1, 8], 1.0, &mut rng);
        let r1 = random_tensor(vec![1, 8], 1.0, &mut rng);
        let base = run_ao(&set, &cfg, &h, &[r0, r1]);
        let zeros = Tensor::zeros(vec![1, 8]);
        let mut set_zero_ranks = set.clone();
        for (name, t) in set_zero_ranks.iter_mut() {
            if name == "aggregator.ranks" {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let hollow = run_ao(&set_zero_ranks, &cfg, &h, &[zeros.clone(), zeros]);
        let diff: f64 = base
            .iter()
            .zip(hollow.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-8);
    }

    #[test]
    fn gradients_reach_every_aggregator_parameter() {
        let cfg = cfg_small(2);
        let set = init_params(&cfg, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let h = random_tensor(vec![3, 8], 0.8, &mut rng);
        let r0 = random_tensor(vec![1, 8], 0.8, &mut rng);
        let r1 = random_tensor(vec![1, 8], 0.8, &mut rng);
        let names: Vec<String> = set.iter().map(|(n, _)| n).collect();
        let mut inputs = vec![h, r0, r1];
        inputs.extend(set.iter().map(|(_, t)| t.clone()));

        // nonzero gradient flows into the target and rank embeddings
        let mut tape = Tape::<f64>::new();
        let vars_set = set.load_on_tape(&mut tape).unwrap();
        let hv = tape.constant(inputs[0].clone()).unwrap();
        let rv: Vec<Var> = (1..3)
            .map(|i| tape.constant(inputs[i].clone()).unwrap())
            .collect();
        let (ao, _) = forward_node(&mut tape, &vars_set, &cfg, hv, &rv, None).unwrap();
        let loss = tape.sum_all(ao).unwrap();
        let grads = tape.backward(loss).unwrap();
        for name in ["aggregator.target", "aggregator.ranks"] {
            let v = vars_set.get(name).unwrap();
            let g = grads.get(v).expect("gradient present");
            assert!(g.data().iter().any(|x| x.abs() > 1e-12), "{name} grad is zero");
        }

        let err = grad_check_sampled(
            |tape, vars| {
                let mut pv = std::collections::BTreeMap::new();
                for (name, v) in names.iter().zip(vars.iter().skip(3)) {
                    pv.insert(name.clone(), *v);
                }
                let pvars = ParamVars::from_map(pv);
                let (ao, _) =
                    forward_node(tape, &pvars, &cfg, vars[0], &[vars[1], vars[2]], None)?;
                Ok(ao)
            },
            &inputs,
            24,
            101,
        )
        .unwrap();
        assert!(err < 1e-4, "aggregator grad rel err {err}");
    }
}
