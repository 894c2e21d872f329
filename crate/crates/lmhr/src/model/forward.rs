//! End-to-end forward pass: encode, retrieve, aggregate, learn the graph,
//! run the backend, fuse, and compute the joint loss.

use crate::aggregator::AttentionProbe;
use crate::config::RunConfig;
use crate::data::{segment_series, MtsTensor, NormStats, WindowSample};
use crate::error::{LmhrError, Result};
use crate::eval::Predictions;
use crate::model::{fuse_and_predict, regression_loss, total_loss};
use crate::numerics::nn::DropoutCtx;
use crate::numerics::optim::ParamVars;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::retriever::{hretrieve, RetrievalResult};
use rand_chacha::ChaCha8Rng;

/// Train vs eval: training consumes the RNG for dropout masks and Gumbel
/// noise; evaluation touches no randomness at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// One batch of windows, already normalized and segmented.
pub struct BatchData<T> {
    /// per item, per node: P x (L_s * C) segment matrix
    pub segments: Vec<Vec<Tensor<T>>>,
    /// per item, per node: the most recent L_s x C window
    pub last_windows: Vec<Vec<Tensor<T>>>,
    /// per item: N x T_f normalized targets (value channel)
    pub targets: Vec<Tensor<T>>,
    /// absolute series index where each item's target window starts
    pub target_starts: Vec<usize>,
}

impl<T: Scalar> BatchData<T> {
    pub fn n_items(&self) -> usize {
        self.segments.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.segments.first().map(|s| s.len()).unwrap_or(0)
    }
}

/// Segment and slice a set of windows of the normalized dataset.
pub fn build_batch<T: Scalar>(
    x: &MtsTensor,
    windows: &[WindowSample],
    cfg: &RunConfig,
) -> Result<BatchData<T>> {
    if windows.is_empty() {
        return Err(LmhrError::shape("empty batch"));
    }
    let c = x.n_channels();
    let vc = x.value_channel()?;
    let l_s = cfg.model.l_s;
    let stride = cfg.effective_stride();
    let mut segments = Vec::with_capacity(windows.len());
    let mut last_windows = Vec::with_capacity(windows.len());
    let mut targets = Vec::with_capacity(windows.len());
    let mut target_starts = Vec::with_capacity(windows.len());
    for w in windows {
        let mut node_segs = Vec::with_capacity(x.n_nodes());
        let mut node_last = Vec::with_capacity(x.n_nodes());
        for n in 0..x.n_nodes() {
            let series = x.node_window(n, w.t0, w.l);
            let seg = segment_series(&series, w.l, l_s, stride, c)?;
            let data: Vec<T> = seg.data.iter().map(|&v| T::of(v as f64)).collect();
            node_segs.push(Tensor::new(vec![seg.p, l_s * c], data)?);
            let last: Vec<T> = series[(w.l - l_s) * c..]
                .iter()
                .map(|&v| T::of(v as f64))
                .collect();
            node_last.push(Tensor::new(vec![l_s, c], last)?);
        }
        segments.push(node_segs);
        last_windows.push(node_last);
        let mut tgt = Vec::with_capacity(x.n_nodes() * w.t_f);
        for n in 0..x.n_nodes() {
            for t in w.target_range() {
                tgt.push(T::of(x.at(t, n, vc) as f64));
            }
        }
        targets.push(Tensor::new(vec![x.n_nodes(), w.t_f], tgt)?);
        target_starts.push(w.t0 + w.l);
    }
    Ok(BatchData {
        segments,
        last_windows,
        targets,
        target_starts,
    })
}

/// Handles to everything a caller may need after one forward pass.
pub struct ForwardArtifacts {
    pub total: Var,
    pub reg: Var,
    pub graph: Option<Var>,
    /// per item: N x T_f normalized predictions
    pub preds: Vec<Var>,
    pub retrieval: Option<RetrievalResult>,
    /// per item, per node, when the aggregator is enabled
    pub attention: Vec<Vec<AttentionProbe>>,
}

fn needs_retrieval(cfg: &RunConfig, n_nodes: usize) -> bool {
    cfg.retrieval_enabled(n_nodes)
        && ((cfg.ablation.use_aggregator && cfg.retrieval.k_s > 0)
            || cfg.ablation.use_graph_learning
            || cfg.effective_stgnn())
}

/// Full forward over one batch. `global_series` (per-node training-split
/// series) is required when graph learning is on. `fixed_retrieval`
/// bypasses the retriever, which the end-to-end gradient check uses to
/// freeze the non-differentiable indices.
#[allow(clippy::too_many_arguments)]
pub fn forward_batch<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &RunConfig,
    batch: &BatchData<T>,
    global_series: Option<&[Tensor<T>]>,
    phase: Phase,
    rng: &mut ChaCha8Rng,
    fixed_retrieval: Option<&RetrievalResult>,
) -> Result<ForwardArtifacts> {
    let n = batch.n_nodes();
    let b = batch.n_items();
    if n == 0 || b == 0 {
        return Err(LmhrError::shape("forward: empty batch"));
    }
    let (_, seg_width) = batch.segments[0][0].dims2()?;
    if seg_width % cfg.model.l_s != 0 {
        return Err(LmhrError::shape(format!(
            "forward: segment width {seg_width} not divisible by L_s {}",
            cfg.model.l_s
        )));
    }
    let n_channels = seg_width / cfg.model.l_s;
    let enc_cfg = cfg.encoder_config(n_channels)?;
    let flags = cfg.ablation;
    let dropout_on = phase == Phase::Train && cfg.model.dropout > 0.0;

    // 1. encode all (item, node) slices
    let (h_vars, rep) = {
        let mut ctx_storage;
        let drop = if dropout_on {
            ctx_storage = DropoutCtx {
                rate: cfg.model.dropout,
                rng: &mut *rng,
            };
            Some(&mut ctx_storage)
        } else {
            None
        };
        crate::encoder::encode_batch(tape, vars, &enc_cfg, &batch.segments, drop)?
    };

    // 2. hierarchical retrieval on the representation values
    let retrieval = if needs_retrieval(cfg, n) {
        match fixed_retrieval {
            Some(r) => Some(r.clone()),
            None => Some(hretrieve(&rep, &cfg.retriever_config())?),
        }
    } else {
        None
    };

    // 3. static global features, recomputed inside the graph so the
    //    encoder's convolution parameters keep receiving gradient
    let f_g = if flags.use_graph_learning {
        let series = global_series.ok_or_else(|| {
            LmhrError::config("graph learning requires the training-split series")
        })?;
        let g_cfg = cfg.graph_config(n_channels);
        Some(crate::graph::global_encode(tape, vars, &g_cfg, series)?)
    } else {
        None
    };

    let p_segs = rep.p;
    let agg_cfg = cfg.aggregator_config(n);
    let mut preds = Vec::with_capacity(b);
    let mut graph_losses = Vec::new();
    let mut attention = Vec::new();

    for bi in 0..b {
        // last-segment representations, N x d
        let hp_rows: Vec<Var> = (0..n)
            .map(|i| tape.row(h_vars[bi][i], p_segs - 1))
            .collect::<Result<_>>()?;
        let h_p = tape.concat_rows(&hp_rows)?;

        // aggregator over retrieved context
        let mut item_attention = Vec::new();
        let ao = if flags.use_aggregator {
            let mut rows = Vec::with_capacity(n);
            for i in 0..n {
                let retrieved: Vec<Var> = match &retrieval {
                    Some(plan) if agg_cfg.k_s > 0 => plan
                        .provenance_of(bi, i)
                        .iter()
                        .map(|pv| tape.gather_rows(h_vars[bi][pv.series], &[pv.segment]))
                        .collect::<Result<_>>()?,
                    _ => Vec::new(),
                };
                let mut ctx_storage;
                let drop = if dropout_on {
                    ctx_storage = DropoutCtx {
                        rate: cfg.model.dropout,
                        rng: &mut *rng,
                    };
                    Some(&mut ctx_storage)
                } else {
                    None
                };
                let (ao_i, probe) = crate::aggregator::forward_node(
                    tape,
                    vars,
                    &agg_cfg,
                    h_vars[bi][i],
                    &retrieved,
                    drop,
                )?;
                item_attention.push(probe);
                rows.push(ao_i);
            }
            Some(tape.concat_rows(&rows)?)
        } else {
            None
        };
        attention.push(item_attention);

        // graph structure learning and the backend adjacency
        let adjacency = if flags.use_graph_learning {
            let plan = retrieval
                .as_ref()
                .expect("graph learning validated to require retrieval");
            // the dynamic half of the node embedding: aggregator output, or
            // the last-segment representation when the aggregator is ablated
            let dynamic = ao.unwrap_or(h_p);
            let z = crate::graph::node_embedding(tape, vars, dynamic, f_g.unwrap())?;
            let theta = crate::graph::pairwise_theta(tape, vars, z)?;
            let a_r = &plan.adjacency[bi * n * n..(bi + 1) * n * n];
            graph_losses.push(crate::graph::graph_loss(tape, theta, a_r)?);
            if cfg.effective_stgnn() {
                Some(match phase {
                    Phase::Train => crate::graph::gumbel_sample(tape, theta, cfg.graph.tau, rng)?,
                    Phase::Eval => crate::graph::adjacency_probs(tape, theta)?,
                })
            } else {
                None
            }
        } else if cfg.effective_stgnn() {
            // ablated graph learning falls back to the retrieval adjacency
            match &retrieval {
                Some(plan) => {
                    let a_r = &plan.adjacency[bi * n * n..(bi + 1) * n * n];
                    let data: Vec<T> = a_r.iter().map(|&v| T::of(v as f64)).collect();
                    Some(tape.constant(Tensor::new(vec![n, n], data)?)?)
                }
                None => None,
            }
        } else {
            None
        };

        // short-term spatial-temporal branch
        let h_stgnn = if cfg.effective_stgnn() {
            let b_cfg = cfg.backend_config(n_channels);
            Some(crate::backend::stgnn_forward(
                tape,
                vars,
                &b_cfg,
                &batch.last_windows[bi],
                adjacency,
            )?)
        } else {
            None
        };

        let hp_branch = if flags.use_hp_branch { Some(h_p) } else { None };
        preds.push(fuse_and_predict(tape, vars, h_stgnn, hp_branch, ao)?);
    }

    let reg = regression_loss(tape, &preds, &batch.targets)?;
    let graph = if graph_losses.is_empty() {
        None
    } else {
        let stacked = tape.concat_rows(&graph_losses)?;
        Some(tape.mean_all(stacked)?)
    };
    let total = total_loss(tape, reg, graph, cfg.graph.lambda)?;
    Ok(ForwardArtifacts {
        total,
        reg,
        graph,
        preds,
        retrieval,
        attention,
    })
}

/// Read the per-item prediction vars into a denormalized block.
pub fn read_predictions<T: Scalar>(
    tape: &Tape<T>,
    preds: &[Var],
    stats: &NormStats,
) -> Result<Predictions> {
    if preds.is_empty() {
        return Err(LmhrError::shape("no predictions to read"));
    }
    let (n, t_f) = tape.value(preds[0]).dims2()?;
    let mut out = Predictions::zeros(preds.len(), t_f, n);
    for (s, &p) in preds.iter().enumerate() {
        let v = tape.value(p);
        for i in 0..n {
            for h in 0..t_f {
                let denorm =
                    v.at2(i, h).as_f64() * stats.std_for(i) as f64 + stats.mean_for(i) as f64;
                out.set(s, h, i, denorm);
            }
        }
    }
    Ok(out)
}
