//! Dataset ingestion, normalization, sliding-window sampling, soft-break
//! segmentation, and synthetic-data generation.

pub mod format;
pub mod synth;

use crate::error::{LmhrError, Result};
use serde::{Deserialize, Serialize};

/// Role of one data channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelRole {
    Value,
    TimeOfDay,
    DayOfWeek,
}

/// Dense T x N x C multivariate series with channel semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct MtsTensor {
    values: Vec<f32>,
    t_len: usize,
    n_nodes: usize,
    n_channels: usize,
    pub sample_rate_minutes: u32,
    pub channels: Vec<ChannelRole>,
}

impl MtsTensor {
    pub fn new(
        values: Vec<f32>,
        t_len: usize,
        n_nodes: usize,
        n_channels: usize,
        sample_rate_minutes: u32,
        channels: Vec<ChannelRole>,
    ) -> Result<Self> {
        if t_len == 0 || n_nodes == 0 || n_channels == 0 {
            return Err(LmhrError::format("dataset dims must all be >= 1"));
        }
        if values.len() != t_len * n_nodes * n_channels {
            return Err(LmhrError::format(format!(
                "payload holds {} values, shape implies {}",
                values.len(),
                t_len * n_nodes * n_channels
            )));
        }
        if channels.len() != n_channels {
            return Err(LmhrError::format(format!(
                "{} channel roles declared for {} channels",
                channels.len(),
                n_channels
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(LmhrError::format(format!(
                "non-finite value at flat offset {pos}"
            )));
        }
        let t = MtsTensor {
            values,
            t_len,
            n_nodes,
            n_channels,
            sample_rate_minutes,
            channels,
        };
        t.validate_calendar_channels()?;
        Ok(t)
    }

    fn validate_calendar_channels(&self) -> Result<()> {
        for (c, role) in self.channels.iter().enumerate() {
            if matches!(role, ChannelRole::TimeOfDay | ChannelRole::DayOfWeek) {
                for t in 0..self.t_len {
                    for n in 0..self.n_nodes {
                        let v = self.at(t, n, c);
                        if !(0.0..1.0).contains(&v) {
                            return Err(LmhrError::format(format!(
                                "calendar channel {c} value {v} out of [0,1) at t={t} n={n}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }
    pub fn n_channels(&self) -> usize {
        self.n_channels
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn at(&self, t: usize, n: usize, c: usize) -> f32 {
        self.values[(t * self.n_nodes + n) * self.n_channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, t: usize, n: usize, c: usize) -> &mut f32 {
        &mut self.values[(t * self.n_nodes + n) * self.n_channels + c]
    }

    /// One node's series for one channel.
    pub fn node_channel(&self, n: usize, c: usize) -> Vec<f32> {
        (0..self.t_len).map(|t| self.at(t, n, c)).collect()
    }

    /// One node's `[start, start+len)` slice over all channels, time-major.
    pub fn node_window(&self, n: usize, start: usize, len: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(len * self.n_channels);
        for t in start..start + len {
            for c in 0..self.n_channels {
                out.push(self.at(t, n, c));
            }
        }
        out
    }

    /// Index of the single raw-value channel.
    pub fn value_channel(&self) -> Result<usize> {
        let idx: Vec<usize> = self
            .channels
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == ChannelRole::Value)
            .map(|(i, _)| i)
            .collect();
        match idx.as_slice() {
            [one] => Ok(*one),
            _ => Err(LmhrError::format(format!(
                "expected exactly one value channel, found {}",
                idx.len()
            ))),
        }
    }

    /// Append time-of-day and day-of-week channels derived from the sample
    /// rate. Used when a dataset carries only the raw value channel.
    pub fn augment_time_channels(&self) -> Result<MtsTensor> {
        if self.n_channels != 1 || self.channels[0] != ChannelRole::Value {
            return Err(LmhrError::format(
                "time-channel augmentation expects a single value channel",
            ));
        }
        if self.sample_rate_minutes == 0 {
            return Err(LmhrError::format("sample rate must be > 0 to augment"));
        }
        let rate = self.sample_rate_minutes as usize;
        let mut values = Vec::with_capacity(self.t_len * self.n_nodes * 3);
        for t in 0..self.t_len {
            let minutes = t * rate;
            let tod = (minutes % 1440) as f32 / 1440.0;
            let dow = ((minutes / 1440) % 7) as f32 / 7.0;
            for n in 0..self.n_nodes {
                values.push(self.at(t, n, 0));
                values.push(tod);
                values.push(dow);
            }
        }
        MtsTensor::new(
            values,
            self.t_len,
            self.n_nodes,
            3,
            self.sample_rate_minutes,
            vec![ChannelRole::Value, ChannelRole::TimeOfDay, ChannelRole::DayOfWeek],
        )
    }
}

/// Per-node (or global) z-score statistics for the value channel, computed
/// from the training split only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub per_node: bool,
    /// true when any std hit the 1e-8 floor (constant series)
    pub floored: bool,
}

pub const STD_FLOOR: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZDirection {
    Normalize,
    Denormalize,
}

impl NormStats {
    /// Compute statistics over `[0, train_len)` of the value channel.
    pub fn compute(x: &MtsTensor, train_len: usize, per_node: bool) -> Result<NormStats> {
        if train_len == 0 || train_len > x.t_len() {
            return Err(LmhrError::config(format!(
                "training length {train_len} out of range (T = {})",
                x.t_len()
            )));
        }
        let vc = x.value_channel()?;
        let n = x.n_nodes();
        let floored;
        let build = |sums: Vec<(f64, f64, usize)>| -> (Vec<f32>, Vec<f32>, bool) {
            let mut means = Vec::new();
            let mut stds = Vec::new();
            let mut fl = false;
            for (s, s2, cnt) in sums {
                let mean = s / cnt as f64;
                let var = (s2 / cnt as f64 - mean * mean).max(0.0);
                let mut std = var.sqrt() as f32;
                if std < STD_FLOOR {
                    std = STD_FLOOR;
                    fl = true;
                }
                means.push(mean as f32);
                stds.push(std);
            }
            (means, stds, fl)
        };
        let (mean, std) = if per_node {
            let mut sums = vec![(0.0f64, 0.0f64, 0usize); n];
            for t in 0..train_len {
                for i in 0..n {
                    let v = x.at(t, i, vc) as f64;
                    sums[i].0 += v;
                    sums[i].1 += v * v;
                    sums[i].2 += 1;
                }
            }
            let (m, s, fl) = build(sums);
            floored = fl;
            (m, s)
        } else {
            let mut sum = (0.0f64, 0.0f64, 0usize);
            for t in 0..train_len {
                for i in 0..n {
                    let v = x.at(t, i, vc) as f64;
                    sum.0 += v;
                    sum.1 += v * v;
                    sum.2 += 1;
                }
            }
            let (m, s, fl) = build(vec![sum]);
            floored = fl;
            (m, s)
        };
        Ok(NormStats {
            mean,
            std,
            per_node,
            floored,
        })
    }

    pub fn mean_for(&self, node: usize) -> f32 {
        if self.per_node {
            self.mean[node]
        } else {
            self.mean[0]
        }
    }

    pub fn std_for(&self, node: usize) -> f32 {
        if self.per_node {
            self.std[node]
        } else {
            self.std[0]
        }
    }
}

/// Apply (or undo) the z-score on the value channel only.
pub fn zscore(x: &MtsTensor, stats: &NormStats, direction: ZDirection) -> Result<MtsTensor> {
    let vc = x.value_channel()?;
    let mut out = x.clone();
    for t in 0..x.t_len() {
        for n in 0..x.n_nodes() {
            let v = x.at(t, n, vc);
            let (m, s) = (stats.mean_for(n), stats.std_for(n));
            *out.at_mut(t, n, vc) = match direction {
                ZDirection::Normalize => (v - m) / s,
                ZDirection::Denormalize => v * s + m,
            };
        }
    }
    Ok(out)
}

/// Chronological index ranges of the three splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: std::ops::Range<usize>,
    pub val: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

/// Contiguous chronological split by ratios that must sum to 1.
pub fn split_dataset(t_len: usize, ratios: (f64, f64, f64)) -> Result<SplitRanges> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-6 {
        return Err(LmhrError::config(format!("split ratios sum to {sum}, not 1")));
    }
    if ratios.0 <= 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(LmhrError::config("split ratios must be non-negative"));
    }
    let b1 = (t_len as f64 * ratios.0).floor() as usize;
    let b2 = (t_len as f64 * (ratios.0 + ratios.1)).floor() as usize;
    Ok(SplitRanges {
        train: 0..b1,
        val: b1..b2,
        test: b2..t_len,
    })
}

/// One forecasting sample: history `[t0, t0+l)` followed by target
/// `[t0+l, t0+l+t_f)`, both inside a single split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSample {
    pub t0: usize,
    pub l: usize,
    pub t_f: usize,
}

impl WindowSample {
    pub fn history_range(&self) -> std::ops::Range<usize> {
        self.t0..self.t0 + self.l
    }
    pub fn target_range(&self) -> std::ops::Range<usize> {
        self.t0 + self.l..self.t0 + self.l + self.t_f
    }
}

/// Enumerate samples fully contained in `range`, ordered by start index.
/// For stride 1 the count is `len - l - t_f + 1`.
pub fn make_windows(
    range: std::ops::Range<usize>,
    l: usize,
    t_f: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if stride == 0 {
        return Err(LmhrError::config("window stride must be >= 1"));
    }
    let len = range.end.saturating_sub(range.start);
    if len < l + t_f {
        return Err(LmhrError::config(format!(
            "split length {len} too short for history {l} + horizon {t_f}"
        )));
    }
    let mut out = Vec::new();
    let mut t0 = range.start;
    while t0 + l + t_f <= range.end {
        out.push(WindowSample { t0, l, t_f });
        t0 += stride;
    }
    Ok(out)
}

/// Segment layout for one choice of (L, L_s, l): the number of segments P
/// follows `P = floor((L - L_s) / l) + 2`, and the series is front-padded
/// with repeated copies of its first value so that the final segment ends
/// exactly on the last original point. The pad length is l when l divides
/// L - L_s and shrinks by the remainder otherwise.
pub fn segment_layout(l_total: usize, l_s: usize, l_stride: usize) -> Result<(usize, usize)> {
    if l_stride == 0 || l_stride > l_s {
        return Err(LmhrError::config(format!(
            "stride {l_stride} must be in [1, segment length {l_s}]"
        )));
    }
    if l_s > l_total {
        return Err(LmhrError::config(format!(
            "segment length {l_s} exceeds history length {l_total}"
        )));
    }
    let p = (l_total - l_s) / l_stride + 2;
    let pad_len = (p - 1) * l_stride + l_s - l_total;
    Ok((p, pad_len))
}

/// Segments of one node's history window.
#[derive(Debug, Clone)]
pub struct SegmentedSeries {
    /// P x L_s x C, segment-major then time then channel
    pub data: Vec<f32>,
    pub p: usize,
    pub l_s: usize,
    pub n_channels: usize,
    pub pad_len: usize,
}

impl SegmentedSeries {
    pub fn segment(&self, j: usize) -> &[f32] {
        let w = self.l_s * self.n_channels;
        &self.data[j * w..(j + 1) * w]
    }
}

/// Soft-break segmentation of a time-major L x C series.
pub fn segment_series(
    series: &[f32],
    l_total: usize,
    l_s: usize,
    l_stride: usize,
    n_channels: usize,
) -> Result<SegmentedSeries> {
    if series.len() != l_total * n_channels {
        return Err(LmhrError::shape(format!(
            "series has {} values, expected {} ({}x{})",
            series.len(),
            l_total * n_channels,
            l_total,
            n_channels
        )));
    }
    let (p, pad_len) = segment_layout(l_total, l_s, l_stride)?;
    let padded_len = l_total + pad_len;
    let mut padded = Vec::with_capacity(padded_len * n_channels);
    for _ in 0..pad_len {
        padded.extend_from_slice(&series[0..n_channels]);
    }
    padded.extend_from_slice(series);
    let mut data = Vec::with_capacity(p * l_s * n_channels);
    for j in 0..p {
        let start = j * l_stride;
        data.extend_from_slice(&padded[start * n_channels..(start + l_s) * n_channels]);
    }
    Ok(SegmentedSeries {
        data,
        p,
        l_s,
        n_channels,
        pad_len,
    })
}

/// Per-node segment matrices for one history window.
#[derive(Debug, Clone)]
pub struct SegmentBank {
    pub nodes: Vec<SegmentedSeries>,
    pub l: usize,
    pub l_s: usize,
    pub stride: usize,
    pub p: usize,
    pub pad_len: usize,
}

impl SegmentBank {
    pub fn build(
        x: &MtsTensor,
        window: &WindowSample,
        l_s: usize,
        stride: usize,
    ) -> Result<SegmentBank> {
        let c = x.n_channels();
        let mut nodes = Vec::with_capacity(x.n_nodes());
        for n in 0..x.n_nodes() {
            let series = x.node_window(n, window.t0, window.l);
            nodes.push(segment_series(&series, window.l, l_s, stride, c)?);
        }
        let (p, pad_len) = segment_layout(window.l, l_s, stride)?;
        Ok(SegmentBank {
            nodes,
            l: window.l,
            l_s,
            stride,
            p,
            pad_len,
        })
    }

    /// Map a segment index to the window-relative index range it covers in
    /// the unpadded series (clipped at the front).
    pub fn segment_span(&self, j: usize) -> (usize, usize) {
        let start_padded = j * self.stride;
        let end_padded = start_padded + self.l_s;
        let start = start_padded.saturating_sub(self.pad_len);
        let end = end_padded - self.pad_len;
        (start, end)
    }
}

/// Rebuild the padded series from segment 0 plus the trailing `stride`
/// points of each later segment. Test oracle for the segment layout.
pub fn reconstruct_padded(seg: &SegmentedSeries, stride: usize) -> Vec<f32> {
    let c = seg.n_channels;
    let mut out = Vec::new();
    out.extend_from_slice(seg.segment(0));
    for j in 1..seg.p {
        let s = seg.segment(j);
        out.extend_from_slice(&s[(seg.l_s - stride) * c..]);
    }
    out
}
