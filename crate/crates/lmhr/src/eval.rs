//! Forecast evaluation: MAE/RMSE/MAPE with horizon-wise reporting, the
//! rapidly-changing-pattern selection, and CSV/JSON report emission.

use crate::data::MtsTensor;
use crate::error::{LmhrError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Dense prediction / target block: samples x horizons x nodes, one value
/// channel, on the denormalized scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    data: Vec<f64>,
    pub n_samples: usize,
    pub t_f: usize,
    pub n_nodes: usize,
}

impl Predictions {
    pub fn new(n_samples: usize, t_f: usize, n_nodes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_samples * t_f * n_nodes {
            return Err(LmhrError::shape(format!(
                "predictions: {} values for {n_samples}x{t_f}x{n_nodes}",
                data.len()
            )));
        }
        Ok(Predictions {
            data,
            n_samples,
            t_f,
            n_nodes,
        })
    }

    pub fn zeros(n_samples: usize, t_f: usize, n_nodes: usize) -> Self {
        Predictions {
            data: vec![0.0; n_samples * t_f * n_nodes],
            n_samples,
            t_f,
            n_nodes,
        }
    }

    #[inline]
    pub fn at(&self, s: usize, h: usize, n: usize) -> f64 {
        self.data[(s * self.t_f + h) * self.n_nodes + n]
    }

    #[inline]
    pub fn set(&mut self, s: usize, h: usize, n: usize, v: f64) {
        self.data[(s * self.t_f + h) * self.n_nodes + n] = v;
    }

    fn same_shape(&self, other: &Predictions) -> bool {
        self.n_samples == other.n_samples
            && self.t_f == other.t_f
            && self.n_nodes == other.n_nodes
    }
}

/// Targets below this magnitude are excluded from MAPE (division hazard);
/// they remain in MAE and RMSE.
pub const MAPE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub mae: f64,
    pub rmse: f64,
    /// percentage; `None` when every target fell under the MAPE floor
    pub mape_pct: Option<f64>,
    pub n: usize,
}

struct Accum {
    abs_sum: f64,
    sq_sum: f64,
    ape_sum: f64,
    ape_n: usize,
    n: usize,
}

impl Accum {
    fn new() -> Self {
        Accum {
            abs_sum: 0.0,
            sq_sum: 0.0,
            ape_sum: 0.0,
            ape_n: 0,
            n: 0,
        }
    }

    fn push(&mut self, yhat: f64, y: f64) {
        let e = yhat - y;
        self.abs_sum += e.abs();
        self.sq_sum += e * e;
        if y.abs() >= MAPE_FLOOR {
            self.ape_sum += e.abs() / y.abs();
            self.ape_n += 1;
        }
        self.n += 1;
    }

    fn finish(&self) -> MetricTriple {
        let n = self.n.max(1) as f64;
        MetricTriple {
            mae: self.abs_sum / n,
            rmse: (self.sq_sum / n).sqrt(),
            mape_pct: if self.ape_n > 0 {
                Some(self.ape_sum / self.ape_n as f64 * 100.0)
            } else {
                None
            },
            n: self.n,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    /// indexed by horizon (0-based step within the forecast window)
    pub per_horizon: Vec<MetricTriple>,
    pub average: MetricTriple,
    pub per_node: Option<Vec<MetricTriple>>,
}

/// Full metric report on denormalized values.
pub fn metrics(yhat: &Predictions, y: &Predictions) -> Result<MetricReport> {
    metrics_with_nodes(yhat, y, false)
}

pub fn metrics_with_nodes(
    yhat: &Predictions,
    y: &Predictions,
    per_node: bool,
) -> Result<MetricReport> {
    if !yhat.same_shape(y) {
        return Err(LmhrError::shape("metrics: prediction/target shape mismatch"));
    }
    let mut horizon = Vec::new();
    horizon.resize_with(y.t_f, Accum::new);
    let mut total = Accum::new();
    let mut nodes = vec![];
    nodes.resize_with(if per_node { y.n_nodes } else { 0 }, Accum::new);
    for s in 0..y.n_samples {
        for h in 0..y.t_f {
            for n in 0..y.n_nodes {
                let (a, b) = (yhat.at(s, h, n), y.at(s, h, n));
                horizon[h].push(a, b);
                total.push(a, b);
                if per_node {
                    nodes[n].push(a, b);
                }
            }
        }
    }
    Ok(MetricReport {
        per_horizon: horizon.iter().map(Accum::finish).collect(),
        average: total.finish(),
        per_node: if per_node {
            Some(nodes.iter().map(Accum::finish).collect())
        } else {
            None
        },
    })
}

/// Population standard deviation over the window [t, t+t_f-1] for every
/// valid t (rolling sums; the tests hold it against a two-pass oracle).
pub fn local_std(x: &[f64], t_f: usize) -> Result<Vec<f64>> {
    if t_f == 0 || x.len() < t_f {
        return Err(LmhrError::config(format!(
            "local_std: window {t_f} does not fit in {} points",
            x.len()
        )));
    }
    let mut sum: f64 = x[..t_f].iter().sum();
    let mut sq: f64 = x[..t_f].iter().map(|v| v * v).sum();
    let tf = t_f as f64;
    let mut out = Vec::with_capacity(x.len() - t_f + 1);
    for t in 0..=x.len() - t_f {
        if t > 0 {
            sum += x[t + t_f - 1] - x[t - 1];
            sq += x[t + t_f - 1] * x[t + t_f - 1] - x[t - 1] * x[t - 1];
        }
        let mean = sum / tf;
        let var = (sq / tf - mean * mean).max(0.0);
        out.push(var.sqrt());
    }
    Ok(out)
}

/// Selected (node, t) pairs for one percentage level.
#[derive(Debug, Clone)]
pub struct RapidPatternMask {
    pub p: f64,
    pub selected: Vec<BTreeSet<usize>>,
    /// per-node similarity threshold: the std of the weakest selected window
    pub thresholds: Vec<f64>,
}

impl RapidPatternMask {
    pub fn contains(&self, node: usize, t: usize) -> bool {
        self.selected[node].contains(&t)
    }

    pub fn count(&self, node: usize) -> usize {
        self.selected[node].len()
    }
}

/// Pick the top p% of windows by local standard deviation per node. The
/// count is exactly ceil(p% of valid windows); ties at the threshold break
/// toward earlier t.
pub fn select_rapid_patterns(stds: &[Vec<f64>], p: f64) -> Result<RapidPatternMask> {
    if !(0.0 < p && p <= 100.0) {
        return Err(LmhrError::config(format!("rapid patterns: p = {p} out of (0, 100]")));
    }
    let mut selected = Vec::with_capacity(stds.len());
    let mut thresholds = Vec::with_capacity(stds.len());
    for node_std in stds {
        let count = ((p / 100.0) * node_std.len() as f64).ceil() as usize;
        let mut order: Vec<usize> = (0..node_std.len()).collect();
        order.sort_by(|&a, &b| {
            node_std[b]
                .partial_cmp(&node_std[a])
                .expect("finite stds")
                .then(a.cmp(&b))
        });
        order.truncate(count);
        thresholds.push(order.last().map(|&t| node_std[t]).unwrap_or(0.0));
        selected.push(order.into_iter().collect());
    }
    Ok(RapidPatternMask {
        p,
        selected,
        thresholds,
    })
}

/// Metrics pooled over every point of the selected windows.
/// `target_starts[s]` is the absolute series index where sample s' target
/// window begins, matching the t used for the std mask.
pub fn metrics_masked(
    yhat: &Predictions,
    y: &Predictions,
    target_starts: &[usize],
    mask: &RapidPatternMask,
) -> Result<MetricTriple> {
    if !yhat.same_shape(y) {
        return Err(LmhrError::shape("masked metrics: shape mismatch"));
    }
    if target_starts.len() != y.n_samples {
        return Err(LmhrError::shape(format!(
            "masked metrics: {} starts for {} samples",
            target_starts.len(),
            y.n_samples
        )));
    }
    let mut acc = Accum::new();
    for s in 0..y.n_samples {
        for n in 0..y.n_nodes {
            if mask.contains(n, target_starts[s]) {
                for h in 0..y.t_f {
                    acc.push(yhat.at(s, h, n), y.at(s, h, n));
                }
            }
        }
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, Serialize)]
pub struct RapidRow {
    pub p: f64,
    pub model: String,
    pub metrics: MetricTriple,
    /// mean percentage improvement over the first model; None for the
    /// baseline row itself or when a mask selected nothing
    pub avg_imp_pct: Option<f64>,
    pub empty_mask: bool,
}

/// Rapidly-changing-pattern table: one row per (p, model), the first model
/// serving as the improvement baseline.
pub fn rapid_report(
    models: &[(String, &Predictions)],
    y: &Predictions,
    target_starts: &[usize],
    masks: &[RapidPatternMask],
) -> Result<Vec<RapidRow>> {
    if models.is_empty() {
        return Err(LmhrError::config("rapid report: no models"));
    }
    let mut rows = Vec::new();
    for mask in masks {
        let empty = (0..y.n_nodes).all(|n| mask.selected[n].is_empty());
        let mut baseline: Option<MetricTriple> = None;
        for (idx, (name, preds)) in models.iter().enumerate() {
            let triple = metrics_masked(preds, y, target_starts, mask)?;
            let avg_imp = if idx == 0 || empty {
                None
            } else {
                baseline.map(|base| {
                    let mut imps = vec![
                        (base.mae - triple.mae) / base.mae * 100.0,
                        (base.rmse - triple.rmse) / base.rmse * 100.0,
                    ];
                    if let (Some(bm), Some(mm)) = (base.mape_pct, triple.mape_pct) {
                        imps.push((bm - mm) / bm * 100.0);
                    }
                    imps.iter().sum::<f64>() / imps.len() as f64
                })
            };
            if idx == 0 {
                baseline = Some(triple);
            }
            rows.push(RapidRow {
                p: mask.p,
                model: name.clone(),
                metrics: triple,
                avg_imp_pct: avg_imp,
                empty_mask: empty,
            });
        }
    }
    Ok(rows)
}

/// Last-observed-value persistence forecast on the raw (denormalized)
/// value channel.
pub fn persistence_forecast(
    x: &MtsTensor,
    samples: &[crate::data::WindowSample],
) -> Result<Predictions> {
    let vc = x.value_channel()?;
    let t_f = samples.first().map(|s| s.t_f).unwrap_or(0);
    let mut out = Predictions::zeros(samples.len(), t_f, x.n_nodes());
    for (s, w) in samples.iter().enumerate() {
        let last = w.t0 + w.l - 1;
        for n in 0..x.n_nodes() {
            let v = x.at(last, n, vc) as f64;
            for h in 0..t_f {
                out.set(s, h, n, v);
            }
        }
    }
    Ok(out)
}

/// Extract the true targets for a set of windows.
pub fn targets_of(x: &MtsTensor, samples: &[crate::data::WindowSample]) -> Result<Predictions> {
    let vc = x.value_channel()?;
    let t_f = samples.first().map(|s| s.t_f).unwrap_or(0);
    let mut out = Predictions::zeros(samples.len(), t_f, x.n_nodes());
    for (s, w) in samples.iter().enumerate() {
        for (h, t) in w.target_range().enumerate() {
            for n in 0..x.n_nodes() {
                out.set(s, h, n, x.at(t, n, vc) as f64);
            }
        }
    }
    Ok(out)
}

fn fmt_mape(m: Option<f64>) -> String {
    match m {
        Some(v) => format!("{v:.6}"),
        None => "NA".to_string(),
    }
}

/// Fixed-column report CSV: model, horizon|p, MAE, RMSE, MAPE_pct, n.
pub fn report_csv(model: &str, report: &MetricReport, horizons: &[usize]) -> String {
    let mut out = String::from("model,horizon,MAE,RMSE,MAPE_pct,n\n");
    for &h in horizons {
        if h == 0 || h > report.per_horizon.len() {
            continue;
        }
        let m = &report.per_horizon[h - 1];
        out.push_str(&format!(
            "{model},{h},{:.6},{:.6},{},{}\n",
            m.mae,
            m.rmse,
            fmt_mape(m.mape_pct),
            m.n
        ));
    }
    let a = &report.average;
    out.push_str(&format!(
        "{model},avg,{:.6},{:.6},{},{}\n",
        a.mae,
        a.rmse,
        fmt_mape(a.mape_pct),
        a.n
    ));
    out
}

/// Table-layout CSV for the rapid-pattern study: p rows x models with the
/// metric columns and the average-improvement column.
pub fn rapid_csv(rows: &[RapidRow]) -> String {
    let mut out = String::from("p,model,MAE,RMSE,MAPE_pct,avg_imp_pct,n,flag\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{},{},{},{}\n",
            r.p,
            r.model,
            r.metrics.mae,
            r.metrics.rmse,
            fmt_mape(r.metrics.mape_pct),
            r.avg_imp_pct
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".to_string()),
            r.metrics.n,
            if r.empty_mask { "empty" } else { "" },
        ));
    }
    out
}
