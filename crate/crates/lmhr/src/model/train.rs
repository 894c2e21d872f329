//! Training loop: seeded shuffling, batched forward/backward, Adam updates,
//! validation metrics, and early stopping on validation MAE.

use crate::config::RunConfig;
use crate::data::{make_windows, split_dataset, zscore, MtsTensor, NormStats, WindowSample, ZDirection};
use crate::error::{LmhrError, Result};
use crate::eval::{metrics, MetricTriple, Predictions};
use crate::model::forward::{build_batch, forward_batch, read_predictions, Phase};
use crate::model::ModelState;
use crate::numerics::optim::adam_step;
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::Serialize;

/// Everything derived from the dataset that training and evaluation share.
pub struct TrainContext {
    /// normalized dataset
    pub data: MtsTensor,
    /// raw (denormalized) dataset for metric reporting
    pub raw: MtsTensor,
    pub stats: NormStats,
    pub train_windows: Vec<WindowSample>,
    pub val_windows: Vec<WindowSample>,
    pub test_windows: Vec<WindowSample>,
    /// per-node training-split series feeding the global encoder
    pub global_series: Vec<Tensor<f32>>,
}

impl TrainContext {
    /// Normalize, split and window a loaded dataset under a config.
    pub fn prepare(raw: MtsTensor, cfg: &RunConfig) -> Result<TrainContext> {
        cfg.validate_with_data(raw.n_nodes(), raw.t_len())?;
        let splits = split_dataset(raw.t_len(), cfg.data.split)?;
        let stats = NormStats::compute(&raw, splits.train.len(), cfg.data.per_node_stats)?;
        let data = zscore(&raw, &stats, ZDirection::Normalize)?;
        let l = cfg.model.l;
        let t_f = cfg.model.t_f;
        let train_windows = make_windows(splits.train.clone(), l, t_f, cfg.training.window_stride)?;
        let val_windows = make_windows(splits.val.clone(), l, t_f, cfg.training.eval_window_stride)?;
        let test_windows =
            make_windows(splits.test.clone(), l, t_f, cfg.training.eval_window_stride)?;
        let mut global_series = Vec::with_capacity(data.n_nodes());
        for n in 0..data.n_nodes() {
            let series = data.node_window(n, 0, splits.train.len());
            let vals: Vec<f32> = series;
            global_series.push(Tensor::new(
                vec![splits.train.len(), data.n_channels()],
                vals,
            )?);
        }
        Ok(TrainContext {
            data,
            raw,
            stats,
            train_windows,
            val_windows,
            test_windows,
            global_series,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_total: f64,
    pub train_reg: f64,
    pub train_graph: Option<f64>,
    pub val: MetricTriple,
    pub seconds: f64,
}

/// One pass over the training windows followed by a validation pass.
/// Batches are a seeded shuffle of the windows; a trailing partial batch is
/// dropped so every step sees the same batch size.
pub fn train_epoch(
    state: &mut ModelState,
    ctx: &TrainContext,
    cfg: &RunConfig,
) -> Result<EpochStats> {
    let started = std::time::Instant::now();
    let mut order: Vec<usize> = (0..ctx.train_windows.len()).collect();
    order.shuffle(&mut state.rng);
    let bs = cfg.training.batch_size;
    if order.len() < bs {
        return Err(LmhrError::config(format!(
            "only {} training windows for batch size {bs}",
            order.len()
        )));
    }
    let mut total_sum = 0.0;
    let mut reg_sum = 0.0;
    let mut graph_sum = 0.0;
    let mut graph_seen = false;
    let mut batches = 0usize;
    for chunk in order.chunks_exact(bs) {
        let windows: Vec<WindowSample> = chunk.iter().map(|&i| ctx.train_windows[i]).collect();
        let batch = build_batch::<f32>(&ctx.data, &windows, cfg)?;
        let mut tape = Tape::<f32>::new();
        let vars = state.params.load_on_tape(&mut tape)?;
        let arts = forward_batch(
            &mut tape,
            &vars,
            cfg,
            &batch,
            Some(&ctx.global_series),
            Phase::Train,
            &mut state.rng,
            None,
        )
        .map_err(|e| match e {
            LmhrError::Numeric(msg) => {
                LmhrError::Numeric(format!("{msg} (training batch {batches})"))
            }
            other => other,
        })?;
        let total_v = tape.value(arts.total).data()[0] as f64;
        if !total_v.is_finite() {
            return Err(LmhrError::numeric(format!(
                "non-finite loss at training batch {batches}"
            )));
        }
        total_sum += total_v;
        reg_sum += tape.value(arts.reg).data()[0] as f64;
        if let Some(g) = arts.graph {
            graph_sum += tape.value(g).data()[0] as f64;
            graph_seen = true;
        }
        let grads = tape.backward(arts.total)?;
        let aligned: Vec<Option<Tensor<f32>>> = state
            .params
            .iter()
            .map(|(name, _)| {
                let var = vars.get(&name).expect("parameter on tape");
                grads.get(var).cloned()
            })
            .collect();
        adam_step(&mut state.params, &aligned, &mut state.adam)?;
        batches += 1;
    }
    state.epoch += 1;

    let (val_preds, _) = predict(state, ctx, cfg, &ctx.val_windows)?;
    let val_targets = crate::eval::targets_of(&ctx.raw, &ctx.val_windows)?;
    let val = metrics(&val_preds, &val_targets)?.average;

    Ok(EpochStats {
        epoch: state.epoch,
        train_total: total_sum / batches.max(1) as f64,
        train_reg: reg_sum / batches.max(1) as f64,
        train_graph: graph_seen.then_some(graph_sum / batches.max(1) as f64),
        val,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Deterministic evaluation-mode predictions over a window list, batched to
/// bound tape size. Returns the denormalized block plus target starts.
pub fn predict(
    state: &ModelState,
    ctx: &TrainContext,
    cfg: &RunConfig,
    windows: &[WindowSample],
) -> Result<(Predictions, Vec<usize>)> {
    if windows.is_empty() {
        return Err(LmhrError::config("no evaluation windows"));
    }
    let t_f = cfg.model.t_f;
    let mut out = Predictions::zeros(windows.len(), t_f, ctx.data.n_nodes());
    let mut starts = Vec::with_capacity(windows.len());
    let mut offset = 0usize;
    // rng is unused in eval mode; any fixed stream works
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for chunk in windows.chunks(cfg.training.batch_size.max(1)) {
        let batch = build_batch::<f32>(&ctx.data, chunk, cfg)?;
        let mut tape = Tape::<f32>::new();
        let vars = state.params.load_on_tape(&mut tape)?;
        let arts = forward_batch(
            &mut tape,
            &vars,
            cfg,
            &batch,
            Some(&ctx.global_series),
            Phase::Eval,
            &mut rng,
            None,
        )?;
        let block = read_predictions(&tape, &arts.preds, &ctx.stats)?;
        for s in 0..chunk.len() {
            for h in 0..t_f {
                for n in 0..ctx.data.n_nodes() {
                    out.set(offset + s, h, n, block.at(s, h, n));
                }
            }
        }
        starts.extend(batch.target_starts.iter());
        offset += chunk.len();
    }
    Ok((out, starts))
}

use rand::SeedableRng;

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

/// Run up to `max_epochs` with early stopping on validation MAE. The best
/// parameters (by validation MAE) are left in `state` when training ends.
pub fn train_loop(
    state: &mut ModelState,
    ctx: &TrainContext,
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    let mut epochs = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = state.params.clone();
    let mut since_best = 0usize;
    let mut stopped_early = false;
    for _ in 0..cfg.training.max_epochs {
        let stats = train_epoch(state, ctx, cfg)?;
        on_epoch(&stats);
        if stats.val.mae < best_val {
            best_val = stats.val.mae;
            best_epoch = stats.epoch;
            best_params = state.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        epochs.push(stats);
        if since_best >= cfg.training.patience {
            stopped_early = true;
            break;
        }
    }
    state.params = best_params;
    Ok(TrainOutcome {
        epochs,
        best_epoch,
        best_val_mae: best_val,
        stopped_early,
    })
}
