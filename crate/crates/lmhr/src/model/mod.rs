//! Model assembly: parameter construction per ablation flags, the fusion
//! head, loss terms, the end-to-end forward pass, the training loop, and
//! checkpointing.

pub mod checkpoint;
pub mod forward;
pub mod train;

use crate::config::RunConfig;
use crate::error::{LmhrError, Result};
use crate::numerics::nn::{mlp, register_mlp};
use crate::numerics::optim::{AdamState, ParamGroup, ParamSet, ParamVars};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use forward::{forward_batch, BatchData, ForwardArtifacts, Phase};
pub use train::{train_loop, train_epoch, EpochStats, TrainContext, TrainOutcome};

/// Build every parameter group the flag set calls for. Disabled modules get
/// no parameters at all, so ablations are visible in the parameter count.
pub fn build_params<T: Scalar>(
    cfg: &RunConfig,
    n_nodes: usize,
    n_channels: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParamSet<T>> {
    let mut set = ParamSet::new();

    let enc_cfg = cfg.encoder_config(n_channels)?;
    enc_cfg.validate()?;
    let mut enc = ParamGroup::new("encoder");
    crate::encoder::register(&mut enc, &enc_cfg);
    set.push_group(enc);

    if cfg.ablation.use_aggregator {
        let agg_cfg = cfg.aggregator_config(n_nodes);
        agg_cfg.validate()?;
        let mut agg = ParamGroup::new("aggregator");
        crate::aggregator::register(&mut agg, &agg_cfg);
        set.push_group(agg);
    }

    if cfg.ablation.use_graph_learning {
        let g_cfg = cfg.graph_config(n_channels);
        g_cfg.validate()?;
        let mut g = ParamGroup::new("graph");
        crate::graph::register(&mut g, &g_cfg);
        set.push_group(g);
    }

    if cfg.effective_stgnn() {
        let b_cfg = cfg.backend_config(n_channels);
        b_cfg.validate()?;
        let mut b = ParamGroup::new("backend");
        crate::backend::register(&mut b, &b_cfg);
        set.push_group(b);
    }

    let mut fusion = ParamGroup::new("fusion");
    let d = cfg.model.d;
    if cfg.effective_stgnn() {
        register_mlp(&mut fusion, "branch_stgnn", &[d, d, d]);
    }
    if cfg.ablation.use_hp_branch {
        register_mlp(&mut fusion, "branch_hp", &[d, d, d]);
    }
    if cfg.ablation.use_aggregator {
        register_mlp(&mut fusion, "branch_ao", &[d, d, d]);
    }
    let h = cfg.model.fusion_hidden;
    register_mlp(&mut fusion, "head", &[d, h, h, cfg.model.t_f]);
    set.push_group(fusion);

    for g in set.groups.iter_mut() {
        g.init_all(rng);
    }
    Ok(set)
}

/// Sum the enabled branch MLPs and push the result through the forecasting
/// head: H_final = sum of MLP(branch), Yhat = MLP(H_final). Output is
/// N x T_f on the normalized scale.
pub fn fuse_and_predict<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    h_stgnn: Option<Var>,
    h_p: Option<Var>,
    ao: Option<Var>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (input, prefix) in [
        (h_stgnn, "fusion.branch_stgnn"),
        (h_p, "fusion.branch_hp"),
        (ao, "fusion.branch_ao"),
    ] {
        if let Some(x) = input {
            let branch = mlp(tape, vars, prefix, x, 2)?;
            total = Some(match total {
                Some(t) => tape.add(t, branch)?,
                None => branch,
            });
        }
    }
    let h_final = total.ok_or_else(|| {
        LmhrError::config("fusion: every branch is disabled, nothing to predict from")
    })?;
    mlp(tape, vars, "fusion.head", h_final, 3)
}

/// Mean absolute error between per-item prediction matrices (N x T_f) and
/// their targets, pooled over every entry of the batch. Computed on
/// normalized values during training.
pub fn regression_loss<T: Scalar>(
    tape: &mut Tape<T>,
    preds: &[Var],
    targets: &[Tensor<T>],
) -> Result<Var> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(LmhrError::shape(format!(
            "regression loss: {} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut diffs = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(targets.iter()) {
        if tape.value(*p).shape() != t.shape() {
            return Err(LmhrError::shape(format!(
                "regression loss: prediction {:?} vs target {:?}",
                tape.value(*p).shape(),
                t.shape()
            )));
        }
        let tv = tape.constant(t.clone())?;
        let d = tape.sub(*p, tv)?;
        diffs.push(tape.abs(d)?);
    }
    let all = tape.concat_rows(&diffs)?;
    tape.mean_all(all)
}

/// L = L_regression + lambda * L_graph.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    l_reg: Var,
    l_graph: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(LmhrError::config("lambda must be >= 0"));
    }
    match l_graph {
        Some(g) => {
            let scaled = tape.scale(g, T::of(lambda))?;
            tape.add(l_reg, scaled)
        }
        None => Ok(l_reg),
    }
}

/// Everything the trainer owns: parameters, optimizer moments, the RNG
/// stream, and bookkeeping. Checkpoints restore all of it bit-exactly.
pub struct ModelState {
    pub params: ParamSet<f32>,
    pub adam: AdamState<f32>,
    pub epoch: usize,
    pub seed: u64,
    pub rng: ChaCha8Rng,
    pub config_hash: String,
}

impl ModelState {
    /// Fresh state: one seed drives parameter init and the training stream.
    pub fn init(cfg: &RunConfig, n_nodes: usize, n_channels: usize) -> Result<ModelState> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = build_params::<f32>(cfg, n_nodes, n_channels, &mut init_rng)?;
        let adam = AdamState::new(&params, cfg.adam_hyper())?;
        Ok(ModelState {
            params,
            adam,
            epoch: 0,
            seed: cfg.seed,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            config_hash: cfg.semantic_hash(),
        })
    }
}
