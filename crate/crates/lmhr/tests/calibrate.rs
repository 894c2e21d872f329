//! Scratch calibration for the direction-check experiment (ignored by
//! default; run with --ignored to re-tune).

use lmhr::config::RunConfig;
use lmhr::data::synth::{synth_mts, SynthSpec};
use lmhr::eval::{metrics_with_nodes, persistence_forecast, targets_of};
use lmhr::model::forward::{build_batch, forward_batch, Phase};
use lmhr::model::{train_loop, ModelState, TrainContext};
use lmhr::numerics::tape::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn synth_cfg(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.l = 48;
    cfg.model.l_s = 12;
    cfg.model.stride = 4;
    cfg.model.t_f = 12;
    cfg.model.d = 32;
    cfg.model.heads = 4;
    cfg.model.fusion_hidden = 64;
    cfg.model.backend_width = 16;
    cfg.model.backend_blocks = 3;
    cfg.model.conv_channels = 8;
    cfg.model.conv_kernel = 5;
    cfg.model.pair_hidden = 32;
    cfg.model.dropout = 0.05;
    cfg.retrieval.k_n = 3;
    cfg.retrieval.k_s = 10;
    cfg.graph.lambda = 0.05;
    cfg.graph.tau = 0.5;
    cfg.training.batch_size = 8;
    cfg.training.max_epochs = 20;
    cfg.training.patience = 30;
    cfg.training.window_stride = 4;
    cfg.training.eval_window_stride = 4;
    cfg.training.lr = 2e-3;
    cfg.seed = seed;
    cfg
}

fn per_node_mae(state: &ModelState, ctx: &TrainContext, cfg: &RunConfig) -> Vec<f64> {
    let (preds, _) = lmhr::model::train::predict(state, ctx, cfg, &ctx.val_windows).unwrap();
    let targets = targets_of(&ctx.raw, &ctx.val_windows).unwrap();
    metrics_with_nodes(&preds, &targets, true)
        .unwrap()
        .per_node
        .unwrap()
        .iter()
        .map(|m| (m.mae * 1000.0).round() / 1000.0)
        .collect()
}

#[test]
#[ignore]
fn calibrate_direction_check() {
    let spec = SynthSpec::lagged_groups(8, 4000, 2);
    let out = synth_mts(&spec, 17).unwrap();
    let raw = out.data;
    let lags = out.manifest.lags.clone();
    println!("lags: {lags:?}");

    let started = std::time::Instant::now();
    let cfg = synth_cfg(41);
    let ctx = TrainContext::prepare(raw.clone(), &cfg).unwrap();
    println!(
        "windows: train {} val {}",
        ctx.train_windows.len(),
        ctx.val_windows.len()
    );

    let mut state = ModelState::init(&cfg, 8, 1).unwrap();
    let o = train_loop(&mut state, &ctx, &cfg, |e| {
        println!(
            "full epoch {} total {:.4} reg {:.4} val_mae {:.4} ({:.1}s)",
            e.epoch, e.train_total, e.train_reg, e.val.mae, e.seconds
        );
    })
    .unwrap();
    println!("full best val {:.4} in {:.1}s", o.best_val_mae, started.elapsed().as_secs_f64());
    println!("full per-node val MAE: {:?}", per_node_mae(&state, &ctx, &cfg));

    // retrieval diagnostics on the trained model over one val batch
    let windows: Vec<_> = ctx.val_windows.iter().take(4).cloned().collect();
    let batch = build_batch::<f32>(&ctx.data, &windows, &cfg).unwrap();
    let mut tape = Tape::<f32>::new();
    let vars = state.params.load_on_tape(&mut tape).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let arts = forward_batch(
        &mut tape, &vars, &cfg, &batch, Some(&ctx.global_series), Phase::Eval, &mut rng, None,
    )
    .unwrap();
    let plan = arts.retrieval.clone().unwrap();
    let p_segs = (cfg.model.l - cfg.model.l_s) / cfg.model.stride + 2;
    for b in 0..2usize {
        for i in 0..8 {
            let tops = plan.top_series_of(b, i);
            let in_group = tops.iter().filter(|&&j| (j < 4) == (i < 4)).count();
            let mut useful = 0;
            let mut offsets = Vec::new();
            for pv in plan.provenance_of(b, i) {
                let d_i = lags[i] as i64;
                let d_j = lags[pv.series] as i64;
                let expected = (p_segs as i64 - 1) - (d_i - d_j) / cfg.model.stride as i64;
                offsets.push(pv.segment as i64 - expected);
                if d_j + 24 <= d_i && ((pv.series < 4) == (i < 4)) {
                    useful += 1;
                }
            }
            let attn = &arts.attention[b][i];
            let retr_mass: f64 = attn.averaged[attn.averaged.len() - cfg.retrieval.k_s..]
                .iter()
                .sum();
            println!(
                "b{b} node{i} lag{} in_group {}/3 useful_src {}/{} seg_offsets {:?} attn_retr {:.3}",
                lags[i], in_group, useful, cfg.retrieval.k_s, offsets, retr_mass
            );
        }
    }

    let mut ab_cfg = cfg.clone();
    ab_cfg.ablation.use_aggregator = false;
    let ctx2 = TrainContext::prepare(raw.clone(), &ab_cfg).unwrap();
    let mut ab_state = ModelState::init(&ab_cfg, 8, 1).unwrap();
    let ab = train_loop(&mut ab_state, &ctx2, &ab_cfg, |_| {}).unwrap();
    println!("ablated best val {:.4}", ab.best_val_mae);
    println!(
        "ablated per-node val MAE: {:?}",
        per_node_mae(&ab_state, &ctx2, &ab_cfg)
    );

    let persistence = persistence_forecast(&ctx.raw, &ctx.val_windows).unwrap();
    let val_targets = targets_of(&ctx.raw, &ctx.val_windows).unwrap();
    let p_mae = metrics_with_nodes(&persistence, &val_targets, false)
        .unwrap()
        .average
        .mae;
    println!("persistence val MAE {p_mae:.4}");
    println!(
        "gaps: vs ablated {:.2}%, vs persistence {:.2}% ({:.1}s total)",
        (1.0 - o.best_val_mae / ab.best_val_mae) * 100.0,
        (1.0 - o.best_val_mae / p_mae) * 100.0,
        started.elapsed().as_secs_f64()
    );
}
