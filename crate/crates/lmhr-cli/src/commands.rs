//! Command implementations. Every command validates its full configuration
//! before any side effect, emits its files under the run directory, and
//! finishes by writing a manifest listing what it produced.

use crate::ConfigArgs;
use lmhr::backend::BackendKind;
use lmhr::config::{hex_digest, RunConfig};
use lmhr::data::format::{load_dataset_with_rate, write_binary};
use lmhr::data::synth::{synth_mts, SynthSpec};
use lmhr::data::segment_layout;
use lmhr::error::{LmhrError, Result};
use lmhr::eval::{
    local_std, metrics_with_nodes, persistence_forecast, rapid_csv, rapid_report, report_csv,
    select_rapid_patterns, targets_of, Predictions,
};
use lmhr::model::checkpoint::{load_checkpoint, save_checkpoint};
use lmhr::model::forward::{build_batch, forward_batch, Phase};
use lmhr::model::{train_loop, ModelState, TrainContext};
use lmhr::numerics::tape::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load the config file (or defaults), apply command-line overrides, then
/// the LMHR_SEED environment override, and validate.
fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(ds) = &args.dataset {
        cfg.data.dataset = ds.to_string_lossy().into_owned();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    if args.no_aggregator {
        cfg.ablation.use_aggregator = false;
    }
    if args.no_hp_branch {
        cfg.ablation.use_hp_branch = false;
    }
    if args.no_stgnn {
        cfg.ablation.use_stgnn = false;
    }
    if args.no_graph_learning {
        cfg.ablation.use_graph_learning = false;
    }
    if args.hard_break {
        cfg.ablation.hard_break = true;
    }
    if let Some(backend) = &args.backend {
        cfg.backend = match backend.as_str() {
            "reference" => BackendKind::Reference,
            "none" => BackendKind::None,
            other => {
                return Err(LmhrError::config(format!(
                    "unknown backend {other} (expected reference | none)"
                )))
            }
        };
    }
    if let Some(lambda) = args.lambda {
        cfg.graph.lambda = lambda;
    }
    if let Some(tau) = args.tau {
        cfg.graph.tau = tau;
    }
    if let Ok(env_seed) = std::env::var("LMHR_SEED") {
        cfg.seed = env_seed
            .parse()
            .map_err(|_| LmhrError::config(format!("LMHR_SEED = {env_seed} is not an integer")))?;
    }
    for warning in cfg.validate()? {
        eprintln!("warning: {warning}");
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_hash: String,
    dataset_sha256: Option<String>,
    files: Vec<String>,
    wall_clock_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_val_mae: Option<f64>,
}

fn load_context(cfg: &RunConfig) -> Result<(TrainContext, String)> {
    if cfg.data.dataset.is_empty() {
        return Err(LmhrError::config("no dataset path configured"));
    }
    let path = PathBuf::from(&cfg.data.dataset);
    let bytes = std::fs::read(&path)?;
    let dataset_hash = hex_digest(&bytes);
    let raw = load_dataset_with_rate(&path, cfg.data.csv_sample_rate_min)?;
    let ctx = TrainContext::prepare(raw, cfg)?;
    Ok((ctx, dataset_hash))
}

pub fn cmd_synth(
    args: &ConfigArgs,
    preset: &str,
    nodes: usize,
    steps: usize,
    groups: usize,
    noise: Option<f64>,
) -> Result<()> {
    let started = std::time::Instant::now();
    let cfg = resolve_config(args)?;
    let mut spec = match preset {
        "default" => SynthSpec::default_spec(),
        "lagged" => SynthSpec::lagged_groups(nodes, steps, groups),
        "pure" => SynthSpec::pure_sines(nodes, steps, groups),
        other => {
            return Err(LmhrError::config(format!(
                "unknown preset {other} (expected default | lagged | pure)"
            )))
        }
    };
    spec.n_nodes = nodes;
    spec.t_len = steps;
    spec.n_groups = groups;
    if preset == "lagged" {
        // re-derive per-node lags for the requested shape
        spec = SynthSpec {
            lags: SynthSpec::lagged_groups(nodes, steps, groups).lags,
            ..spec
        };
    }
    if let Some(sigma) = noise {
        spec.noise_sigma = sigma;
    }
    spec.validate()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let out = synth_mts(&spec, cfg.seed)?;
    let data_path = out_dir.join("synth.lmhr");
    write_binary(&out.data, &data_path)?;
    let manifest_path = out_dir.join("synth_manifest.json");
    write_atomic(&manifest_path, &serde_json::to_vec_pretty(&out.manifest)?)?;
    let run_manifest = RunManifest {
        command: "synth".to_string(),
        config_hash: cfg.semantic_hash(),
        dataset_sha256: Some(hex_digest(&std::fs::read(&data_path)?)),
        files: vec![
            data_path.to_string_lossy().into_owned(),
            manifest_path.to_string_lossy().into_owned(),
        ],
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        best_epoch: None,
        best_val_mae: None,
    };
    write_atomic(
        &out_dir.join("manifest.json"),
        &serde_json::to_vec_pretty(&run_manifest)?,
    )?;
    println!(
        "synth: wrote {} ({} nodes x {} steps) and manifest",
        data_path.display(),
        out.data.n_nodes(),
        out.data.t_len()
    );
    Ok(())
}

pub fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let started = std::time::Instant::now();
    let cfg = resolve_config(args)?;
    let (ctx, dataset_hash) = load_context(&cfg)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;

    let mut state = ModelState::init(&cfg, ctx.data.n_nodes(), ctx.data.n_channels())?;
    let mut log = String::from(
        "epoch,train_total,train_reg,train_graph,val_mae,val_rmse,val_mape_pct,seconds\n",
    );
    let outcome = train_loop(&mut state, &ctx, &cfg, |stats| {
        let row = format!(
            "{},{:.6},{:.6},{},{:.6},{:.6},{},{:.3}\n",
            stats.epoch,
            stats.train_total,
            stats.train_reg,
            stats
                .train_graph
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "NA".to_string()),
            stats.val.mae,
            stats.val.rmse,
            stats
                .val
                .mape_pct
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "NA".to_string()),
            stats.seconds,
        );
        eprint!("epoch {}", row);
        log.push_str(&row);
    })?;

    let log_path = out_dir.join("epoch_log.csv");
    write_atomic(&log_path, log.as_bytes())?;
    let ckpt_path = out_dir.join("checkpoint.lmhrckp");
    save_checkpoint(&state, &ckpt_path)?;
    let config_path = out_dir.join("config_used.toml");
    write_atomic(&config_path, cfg.to_toml_string().as_bytes())?;

    let manifest = RunManifest {
        command: "train".to_string(),
        config_hash: cfg.semantic_hash(),
        dataset_sha256: Some(dataset_hash),
        files: vec![
            log_path.to_string_lossy().into_owned(),
            ckpt_path.to_string_lossy().into_owned(),
            config_path.to_string_lossy().into_owned(),
        ],
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        best_epoch: Some(outcome.best_epoch),
        best_val_mae: Some(outcome.best_val_mae),
    };
    write_atomic(
        &out_dir.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    println!(
        "train: best val MAE {:.6} at epoch {} ({} epochs, {})",
        outcome.best_val_mae,
        outcome.best_epoch,
        outcome.epochs.len(),
        if outcome.stopped_early {
            "stopped early"
        } else {
            "epoch budget reached"
        }
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: String,
    pub mae: f64,
    pub rmse: f64,
    pub mape_pct: Option<f64>,
    pub n: usize,
}

#[derive(Serialize, Deserialize)]
pub struct RapidEntry {
    pub p: f64,
    pub model: String,
    pub mae: f64,
    pub rmse: f64,
    pub mape_pct: Option<f64>,
    pub n: usize,
    pub avg_imp_pct: Option<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct EvalMetricsFile {
    pub model: String,
    pub config_hash: String,
    pub horizons: Vec<HorizonRow>,
    pub rapid: Vec<RapidEntry>,
}

fn horizon_rows(report: &lmhr::eval::MetricReport, horizons: &[usize]) -> Vec<HorizonRow> {
    let mut rows = Vec::new();
    for &h in horizons {
        if h == 0 || h > report.per_horizon.len() {
            continue;
        }
        let m = &report.per_horizon[h - 1];
        rows.push(HorizonRow {
            horizon: h.to_string(),
            mae: m.mae,
            rmse: m.rmse,
            mape_pct: m.mape_pct,
            n: m.n,
        });
    }
    rows.push(HorizonRow {
        horizon: "avg".to_string(),
        mae: report.average.mae,
        rmse: report.average.rmse,
        mape_pct: report.average.mape_pct,
        n: report.average.n,
    });
    rows
}

pub fn cmd_evaluate(args: &ConfigArgs, checkpoint: &Path) -> Result<()> {
    let started = std::time::Instant::now();
    let cfg = resolve_config(args)?;
    let (ctx, dataset_hash) = load_context(&cfg)?;
    let state = load_checkpoint(checkpoint, &cfg, ctx.data.n_nodes(), ctx.data.n_channels())?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;

    let (preds, starts) = lmhr::model::train::predict(&state, &ctx, &cfg, &ctx.test_windows)?;
    let targets = targets_of(&ctx.raw, &ctx.test_windows)?;
    let report = metrics_with_nodes(&preds, &targets, true)?;

    // rapid-pattern masks over the evaluated window starts
    let vc = ctx.raw.value_channel()?;
    let full_std: Vec<Vec<f64>> = (0..ctx.raw.n_nodes())
        .map(|n| {
            let series: Vec<f64> = ctx
                .raw
                .node_channel(n, vc)
                .into_iter()
                .map(|v| v as f64)
                .collect();
            local_std(&series, cfg.model.t_f)
        })
        .collect::<Result<_>>()?;
    let stds_at_starts: Vec<Vec<f64>> = (0..ctx.raw.n_nodes())
        .map(|n| starts.iter().map(|&t| full_std[n][t]).collect())
        .collect();
    let positional_starts: Vec<usize> = (0..starts.len()).collect();
    let masks: Vec<_> = [10.0, 20.0, 30.0, 100.0]
        .iter()
        .map(|&p| select_rapid_patterns(&stds_at_starts, p))
        .collect::<Result<_>>()?;
    let persistence = persistence_forecast(&ctx.raw, &ctx.test_windows)?;
    let models: Vec<(String, &Predictions)> = vec![
        ("persistence".to_string(), &persistence),
        ("lmhr".to_string(), &preds),
    ];
    let rapid_rows = rapid_report(&models, &targets, &positional_starts, &masks)?;

    let metrics_file = EvalMetricsFile {
        model: "lmhr".to_string(),
        config_hash: cfg.semantic_hash(),
        horizons: horizon_rows(&report, &[3, 6, 12]),
        rapid: rapid_rows
            .iter()
            .map(|r| RapidEntry {
                p: r.p,
                model: r.model.clone(),
                mae: r.metrics.mae,
                rmse: r.metrics.rmse,
                mape_pct: r.metrics.mape_pct,
                n: r.metrics.n,
                avg_imp_pct: r.avg_imp_pct,
            })
            .collect(),
    };
    let metrics_json = out_dir.join("metrics.json");
    write_atomic(&metrics_json, &serde_json::to_vec_pretty(&metrics_file)?)?;
    let metrics_csv = out_dir.join("metrics.csv");
    write_atomic(
        &metrics_csv,
        report_csv("lmhr", &report, &[3, 6, 12]).as_bytes(),
    )?;
    let rapid_path = out_dir.join("rapid.csv");
    write_atomic(&rapid_path, rapid_csv(&rapid_rows).as_bytes())?;

    let manifest = RunManifest {
        command: "evaluate".to_string(),
        config_hash: cfg.semantic_hash(),
        dataset_sha256: Some(dataset_hash),
        files: vec![
            metrics_json.to_string_lossy().into_owned(),
            metrics_csv.to_string_lossy().into_owned(),
            rapid_path.to_string_lossy().into_owned(),
        ],
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        best_epoch: None,
        best_val_mae: None,
    };
    write_atomic(
        &out_dir.join("eval_manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    println!(
        "evaluate: test MAE {:.6} RMSE {:.6} over {} samples",
        report.average.mae, report.average.rmse, preds.n_samples
    );
    Ok(())
}

/// Forward one evaluation window and return the artifacts plus the window.
fn single_window_forward(
    cfg: &RunConfig,
    ctx: &TrainContext,
    state: &ModelState,
    sample: usize,
) -> Result<(
    lmhr::model::ForwardArtifacts,
    Tape<f32>,
    lmhr::data::WindowSample,
)> {
    let windows = &ctx.test_windows;
    if sample >= windows.len() {
        return Err(LmhrError::config(format!(
            "sample {sample} out of range ({} test windows)",
            windows.len()
        )));
    }
    let window = windows[sample];
    let batch = build_batch::<f32>(&ctx.data, &[window], cfg)?;
    let mut tape = Tape::<f32>::new();
    let vars = state.params.load_on_tape(&mut tape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
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
    Ok((arts, tape, window))
}

#[derive(Serialize)]
struct RetrievedSegmentDump {
    series: usize,
    segment: usize,
    rank: usize,
    similarity: f64,
    /// absolute index range covered in the retrieved series
    abs_range: (usize, usize),
    raw_values: Vec<f32>,
}

#[derive(Serialize)]
struct RetrievalDump {
    sample: usize,
    node: usize,
    window_start: usize,
    top_series: Vec<usize>,
    series_similarities: Vec<f64>,
    query_abs_range: (usize, usize),
    query_raw_values: Vec<f32>,
    segments: Vec<RetrievedSegmentDump>,
}

pub fn cmd_inspect_retrieval(
    args: &ConfigArgs,
    checkpoint: &Path,
    sample: usize,
    node: usize,
) -> Result<()> {
    let cfg = resolve_config(args)?;
    let (ctx, _) = load_context(&cfg)?;
    let state = load_checkpoint(checkpoint, &cfg, ctx.data.n_nodes(), ctx.data.n_channels())?;
    if node >= ctx.data.n_nodes() {
        return Err(LmhrError::config(format!(
            "node {node} out of range ({} nodes)",
            ctx.data.n_nodes()
        )));
    }
    let (arts, _tape, window) = single_window_forward(&cfg, &ctx, &state, sample)?;
    let plan = arts.retrieval.ok_or_else(|| {
        LmhrError::config("retrieval is disabled under this configuration")
    })?;

    let vc = ctx.raw.value_channel()?;
    let stride = cfg.effective_stride();
    let (_, pad_len) = segment_layout(cfg.model.l, cfg.model.l_s, stride)?;
    let span = |seg: usize| -> (usize, usize) {
        let start_padded = seg * stride;
        let end_padded = start_padded + cfg.model.l_s;
        let rel_start = start_padded.saturating_sub(pad_len);
        let rel_end = end_padded - pad_len;
        (window.t0 + rel_start, window.t0 + rel_end)
    };

    let segments: Vec<RetrievedSegmentDump> = plan
        .provenance_of(0, node)
        .iter()
        .zip(plan.seg_sims_of(0, node).iter())
        .map(|(pv, &sim)| {
            let (a, b) = span(pv.segment);
            RetrievedSegmentDump {
                series: pv.series,
                segment: pv.segment,
                rank: pv.rank,
                similarity: sim,
                abs_range: (a, b),
                raw_values: (a..b).map(|t| ctx.raw.at(t, pv.series, vc)).collect(),
            }
        })
        .collect();
    let query_start = window.t0 + window.l - cfg.model.l_s;
    let dump = RetrievalDump {
        sample,
        node,
        window_start: window.t0,
        top_series: plan.top_series_of(0, node).to_vec(),
        series_similarities: plan
            .top_series_of(0, node)
            .iter()
            .map(|&j| plan.series_sim(0, node, j))
            .collect(),
        query_abs_range: (query_start, window.t0 + window.l),
        query_raw_values: (query_start..window.t0 + window.l)
            .map(|t| ctx.raw.at(t, node, vc))
            .collect(),
        segments,
    };
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let json_path = out_dir.join(format!("retrieval_s{sample}_n{node}.json"));
    write_atomic(&json_path, &serde_json::to_vec_pretty(&dump)?)?;
    let mut csv = String::from("rank,series,segment,similarity\n");
    for s in &dump.segments {
        csv.push_str(&format!(
            "{},{},{},{:.6}\n",
            s.rank, s.series, s.segment, s.similarity
        ));
    }
    let csv_path = out_dir.join(format!("retrieval_s{sample}_n{node}.csv"));
    write_atomic(&csv_path, csv.as_bytes())?;
    println!(
        "inspect-retrieval: wrote {} and {}",
        json_path.display(),
        csv_path.display()
    );
    Ok(())
}

pub fn cmd_dump_attention(
    args: &ConfigArgs,
    checkpoint: &Path,
    sample: usize,
    node: usize,
) -> Result<()> {
    let cfg = resolve_config(args)?;
    if !cfg.ablation.use_aggregator {
        return Err(LmhrError::config(
            "the aggregator is ablated under this configuration; nothing to dump",
        ));
    }
    let (ctx, _) = load_context(&cfg)?;
    let state = load_checkpoint(checkpoint, &cfg, ctx.data.n_nodes(), ctx.data.n_channels())?;
    if node >= ctx.data.n_nodes() {
        return Err(LmhrError::config(format!(
            "node {node} out of range ({} nodes)",
            ctx.data.n_nodes()
        )));
    }
    let (arts, _tape, _) = single_window_forward(&cfg, &ctx, &state, sample)?;
    let probe = &arts.attention[0][node];
    let heads = probe.per_head.len();
    let mut csv = String::from("position,averaged");
    for h in 0..heads {
        csv.push_str(&format!(",head{h}"));
    }
    csv.push('\n');
    for (i, avg) in probe.averaged.iter().enumerate() {
        csv.push_str(&format!("{},{avg:.8}", i + 1));
        for h in 0..heads {
            csv.push_str(&format!(",{:.8}", probe.per_head[h][i]));
        }
        csv.push('\n');
    }
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let path = out_dir.join(format!("attention_s{sample}_n{node}.csv"));
    write_atomic(&path, csv.as_bytes())?;
    println!(
        "dump-attention: target slot {} over {} positions -> {}",
        probe.target_slot + 1,
        probe.averaged.len(),
        path.display()
    );
    Ok(())
}

fn improvement(base: f64, model: f64) -> f64 {
    (base - model) / base * 100.0
}

pub fn cmd_report(baseline: &Path, model: &Path, out: Option<&Path>) -> Result<()> {
    let base: EvalMetricsFile = serde_json::from_slice(&std::fs::read(baseline)?)?;
    let ours: EvalMetricsFile = serde_json::from_slice(&std::fs::read(model)?)?;
    let mut csv = String::from(
        "section,key,base_mae,model_mae,base_rmse,model_rmse,base_mape,model_mape,avg_imp_pct\n",
    );
    for b in &base.horizons {
        if let Some(m) = ours.horizons.iter().find(|h| h.horizon == b.horizon) {
            let mut imps = vec![
                improvement(b.mae, m.mae),
                improvement(b.rmse, m.rmse),
            ];
            if let (Some(bm), Some(mm)) = (b.mape_pct, m.mape_pct) {
                imps.push(improvement(bm, mm));
            }
            let avg = imps.iter().sum::<f64>() / imps.len() as f64;
            csv.push_str(&format!(
                "horizon,{},{:.6},{:.6},{:.6},{:.6},{},{},{:.4}\n",
                b.horizon,
                b.mae,
                m.mae,
                b.rmse,
                m.rmse,
                b.mape_pct.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into()),
                m.mape_pct.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into()),
                avg
            ));
        }
    }
    // rapid rows compare the "lmhr" entries of both files per p level
    for p in [10.0, 20.0, 30.0, 100.0] {
        let pick = |file: &EvalMetricsFile| -> Option<RapidEntry> {
            file.rapid
                .iter()
                .find(|r| r.p == p && r.model == "lmhr")
                .map(|r| RapidEntry {
                    p: r.p,
                    model: r.model.clone(),
                    mae: r.mae,
                    rmse: r.rmse,
                    mape_pct: r.mape_pct,
                    n: r.n,
                    avg_imp_pct: r.avg_imp_pct,
                })
        };
        if let (Some(b), Some(m)) = (pick(&base), pick(&ours)) {
            let mut imps = vec![improvement(b.mae, m.mae), improvement(b.rmse, m.rmse)];
            if let (Some(bm), Some(mm)) = (b.mape_pct, m.mape_pct) {
                imps.push(improvement(bm, mm));
            }
            let avg = imps.iter().sum::<f64>() / imps.len() as f64;
            csv.push_str(&format!(
                "rapid,{p},{:.6},{:.6},{:.6},{:.6},{},{},{:.4}\n",
                b.mae,
                m.mae,
                b.rmse,
                m.rmse,
                b.mape_pct.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into()),
                m.mape_pct.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into()),
                avg
            ));
        }
    }
    match out {
        Some(path) => {
            write_atomic(path, csv.as_bytes())?;
            println!("report: wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
