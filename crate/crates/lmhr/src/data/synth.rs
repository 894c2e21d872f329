//! Synthetic multivariate series with planted group structure and motifs.
//!
//! Each group owns a sinusoid mixture shared (unlagged) by its members plus
//! a master fast timeline — smoothed noise and planted motif instances —
//! that each node reads delayed by its lag, scaled and shifted, plus
//! observation noise. Lagging only the fast component keeps the series-level
//! similarity of a group high while the fast content stays exclusive to the
//! less-lagged members' histories. The generator returns the data together
//! with a manifest of the ground truth: group membership, per-node lags, and
//! every (node, start, motif) planting.

use crate::data::{ChannelRole, MtsTensor};
use crate::error::{LmhrError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_nodes: usize,
    pub t_len: usize,
    pub n_groups: usize,
    /// (period, amplitude) sinusoids shared by a group (random phases)
    pub sine_periods: Vec<(f64, f64)>,
    /// amplitude of the smoothed-noise base component (0 disables)
    pub noise_base_amp: f64,
    /// correlation length of the smoothed-noise base
    pub noise_corr_len: usize,
    /// period of a group-shared repeating rough waveform (0 disables); the
    /// waveform is unlagged whenever lags are multiples of the period
    pub waveform_period: usize,
    pub waveform_amp: f64,
    /// per-node delays; empty means all zero
    pub lags: Vec<usize>,
    /// per-node amplitude jitter around 1
    pub scale_jitter: f64,
    /// per-node additive offset jitter
    pub offset_jitter: f64,
    /// motifs per group library
    pub n_motifs: usize,
    pub motif_len: usize,
    pub motif_amp: f64,
    /// average spacing between plantings (0 disables planting)
    pub motif_gap: usize,
    /// observation noise level
    pub noise_sigma: f64,
    pub sample_rate_minutes: u32,
}

impl SynthSpec {
    /// Default grouped-sinusoid spec: 8 nodes, 4000 steps, 2 groups, sparse
    /// distinctive motifs.
    pub fn default_spec() -> Self {
        SynthSpec {
            n_nodes: 8,
            t_len: 4000,
            n_groups: 2,
            sine_periods: vec![(288.0, 1.0), (96.0, 0.5)],
            noise_base_amp: 0.0,
            waveform_period: 0,
            waveform_amp: 0.0,
            noise_corr_len: 4,
            lags: Vec::new(),
            scale_jitter: 0.1,
            offset_jitter: 0.05,
            n_motifs: 3,
            motif_len: 24,
            motif_amp: 3.0,
            motif_gap: 280,
            noise_sigma: 0.05,
            sample_rate_minutes: 5,
        }
    }

    /// Identical sinusoids within each group, no jitter, no motifs, no noise.
    pub fn pure_sines(n_nodes: usize, t_len: usize, n_groups: usize) -> Self {
        SynthSpec {
            n_nodes,
            t_len,
            n_groups,
            sine_periods: vec![(96.0, 1.0), (36.0, 0.4)],
            noise_base_amp: 0.0,
            waveform_period: 0,
            waveform_amp: 0.0,
            noise_corr_len: 4,
            lags: Vec::new(),
            scale_jitter: 0.0,
            offset_jitter: 0.0,
            n_motifs: 0,
            motif_len: 24,
            motif_amp: 0.0,
            motif_gap: 0,
            noise_sigma: 0.0,
            sample_rate_minutes: 5,
        }
    }

    /// Groups whose members share an unlagged periodic base while the fast
    /// component lags each follower by more steps than a short-term window
    /// plus the horizon. A follower's fast future therefore sits only in the
    /// long histories of its less-lagged peers, and because every lag is a
    /// multiple of the sine periods, the periodic base stays aligned at the
    /// positions where the fast content matches.
    pub fn lagged_groups(n_nodes: usize, t_len: usize, n_groups: usize) -> Self {
        let per = n_nodes / n_groups.max(1);
        let lag_menu = [0usize, 24, 48, 72];
        let lags = (0..n_nodes)
            .map(|i| lag_menu[(i % per.max(1)).min(lag_menu.len() - 1)])
            .collect();
        SynthSpec {
            n_nodes,
            t_len,
            n_groups,
            sine_periods: Vec::new(),
            noise_base_amp: 0.6,
            noise_corr_len: 2,
            waveform_period: 24,
            waveform_amp: 1.2,
            lags,
            scale_jitter: 0.05,
            offset_jitter: 0.0,
            n_motifs: 2,
            motif_len: 24,
            motif_amp: 1.0,
            motif_gap: 400,
            noise_sigma: 0.05,
            sample_rate_minutes: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 || self.t_len == 0 || self.n_groups == 0 {
            return Err(LmhrError::config("synth: dims must be >= 1"));
        }
        if self.n_groups > self.n_nodes {
            return Err(LmhrError::config("synth: more groups than nodes"));
        }
        if !self.lags.is_empty() && self.lags.len() != self.n_nodes {
            return Err(LmhrError::config(format!(
                "synth: {} lags for {} nodes",
                self.lags.len(),
                self.n_nodes
            )));
        }
        if self.n_motifs > 0 && self.motif_len >= self.t_len {
            return Err(LmhrError::config(format!(
                "synth: motif length {} does not fit in {} steps",
                self.motif_len, self.t_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Planting {
    pub node: usize,
    pub start: usize,
    pub motif_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub groups: Vec<Vec<usize>>,
    pub lags: Vec<usize>,
    pub motif_len: usize,
    pub plantings: Vec<Planting>,
}

impl SynthManifest {
    pub fn group_of(&self, node: usize) -> usize {
        self.groups
            .iter()
            .position(|g| g.contains(&node))
            .expect("node belongs to a group")
    }
}

pub struct SynthOutput {
    pub data: MtsTensor,
    pub manifest: SynthManifest,
}

/// Canonical motif waveform for a global `motif_id` at unit amplitude.
fn motif_shape(motif_id: usize, len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let x = (i as f64 + 0.5) / len as f64;
            match motif_id % 4 {
                0 => (-(x - 0.5).powi(2) / 0.02).exp(),
                1 => (2.0 * std::f64::consts::PI * x).sin() * (-(x - 0.5).powi(2) / 0.05).exp(),
                2 => (2.0 * std::f64::consts::PI * 3.0 * x * x).sin()
                    * (-(x - 0.5).powi(2) / 0.08).exp(),
                _ => {
                    let ramp = if x < 0.8 { x / 0.8 } else { (1.0 - x) / 0.2 };
                    2.0 * ramp - 0.8
                }
            }
        })
        .collect()
}

fn smoothed_noise(len: usize, corr_len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let half = (3 * corr_len.max(1)) as i64;
    let sigma = corr_len.max(1) as f64;
    let kernel: Vec<f64> = (-half..=half)
        .map(|k| (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let mut out = vec![0.0; len];
    for t in 0..len as i64 {
        let mut acc = 0.0;
        for (ki, k) in (-half..=half).enumerate() {
            let src = (t + k).rem_euclid(len as i64) as usize;
            acc += white[src] * kernel[ki];
        }
        out[t as usize] = acc / ksum;
    }
    // standardize so amplitude parameters mean what they say
    let mean: f64 = out.iter().sum::<f64>() / len as f64;
    let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
    let std = var.sqrt().max(1e-9);
    for v in out.iter_mut() {
        *v = (*v - mean) / std;
    }
    out
}

/// Generate a dataset plus its ground-truth manifest. Same seed, same bytes.
pub fn synth_mts(spec: &SynthSpec, seed: u64) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // contiguous group blocks
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); spec.n_groups];
    for node in 0..spec.n_nodes {
        groups[node * spec.n_groups / spec.n_nodes].push(node);
    }
    let lags = if spec.lags.is_empty() {
        vec![0; spec.n_nodes]
    } else {
        spec.lags.clone()
    };
    let max_lag = *lags.iter().max().unwrap();
    let master_len = spec.t_len + max_lag;

    // per-group timelines: an unlagged sinusoid base over [0, T) and a fast
    // master (noise + motifs) long enough to serve every lag
    let mut slow_bases = Vec::with_capacity(spec.n_groups);
    let mut masters = Vec::with_capacity(spec.n_groups);
    let mut master_plantings: Vec<Vec<(usize, usize)>> = Vec::with_capacity(spec.n_groups);
    for g in 0..spec.n_groups {
        let mut slow = vec![0.0f64; spec.t_len];
        for &(period, amp) in &spec.sine_periods {
            let phase = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
            for (t, v) in slow.iter_mut().enumerate() {
                *v += amp * (2.0 * std::f64::consts::PI * t as f64 / period + phase).sin();
            }
        }
        if spec.waveform_period > 0 && spec.waveform_amp > 0.0 {
            let pattern = smoothed_noise(spec.waveform_period, 2, &mut rng);
            for (t, v) in slow.iter_mut().enumerate() {
                *v += spec.waveform_amp * pattern[t % spec.waveform_period];
            }
        }
        slow_bases.push(slow);

        let mut master = vec![0.0f64; master_len];
        if spec.noise_base_amp > 0.0 {
            let smooth = smoothed_noise(master_len, spec.noise_corr_len, &mut rng);
            for (v, s) in master.iter_mut().zip(smooth.iter()) {
                *v += spec.noise_base_amp * s;
            }
        }
        let mut plantings = Vec::new();
        if spec.n_motifs > 0 && spec.motif_gap > 0 {
            let mut pos = rng.gen_range(0..spec.motif_gap.max(1));
            while pos + spec.motif_len < master_len {
                let local = rng.gen_range(0..spec.n_motifs);
                let motif_id = g * spec.n_motifs + local;
                let shape = motif_shape(motif_id, spec.motif_len);
                for (k, s) in shape.iter().enumerate() {
                    master[pos + k] += spec.motif_amp * s;
                }
                plantings.push((pos, motif_id));
                let third = (spec.motif_gap / 3).max(1);
                pos += spec.motif_gap + rng.gen_range(0..2 * third) - third;
            }
        }
        masters.push(master);
        master_plantings.push(plantings);
    }

    // per-node extraction
    let mut scales = Vec::with_capacity(spec.n_nodes);
    let mut offsets = Vec::with_capacity(spec.n_nodes);
    for _ in 0..spec.n_nodes {
        scales.push(1.0 + (rng.gen::<f64>() * 2.0 - 1.0) * spec.scale_jitter);
        offsets.push((rng.gen::<f64>() * 2.0 - 1.0) * spec.offset_jitter);
    }
    let mut values = vec![0.0f32; spec.t_len * spec.n_nodes];
    let mut plantings = Vec::new();
    for (g, members) in groups.iter().enumerate() {
        for &node in members {
            let delay = lags[node];
            for t in 0..spec.t_len {
                let base = slow_bases[g][t] + masters[g][t + max_lag - delay];
                let noise = if spec.noise_sigma > 0.0 {
                    // Box-Muller
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen::<f64>();
                    spec.noise_sigma
                        * (-2.0 * u1.ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * u2).cos()
                } else {
                    0.0
                };
                values[t * spec.n_nodes + node] =
                    (scales[node] * base + offsets[node] + noise) as f32;
            }
            for &(s, motif_id) in &master_plantings[g] {
                // master position s appears at node time s - max_lag + delay
                let shifted = s as i64 - max_lag as i64 + delay as i64;
                if shifted >= 0 && (shifted as usize) + spec.motif_len <= spec.t_len {
                    plantings.push(Planting {
                        node,
                        start: shifted as usize,
                        motif_id,
                    });
                }
            }
        }
    }
    plantings.sort_by_key(|p| (p.node, p.start));

    let data = MtsTensor::new(
        values,
        spec.t_len,
        spec.n_nodes,
        1,
        spec.sample_rate_minutes,
        vec![ChannelRole::Value],
    )?;
    Ok(SynthOutput {
        data,
        manifest: SynthManifest {
            groups,
            lags,
            motif_len: spec.motif_len,
            plantings,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for (&x, &y) in a.iter().zip(b.iter()) {
            dot += x as f64 * y as f64;
            na += (x as f64).powi(2);
            nb += (y as f64).powi(2);
        }
        dot / (na.sqrt() * nb.sqrt())
    }

    #[test]
    fn same_seed_identical_output() {
        let spec = SynthSpec::default_spec();
        let a = synth_mts(&spec, 42).unwrap();
        let b = synth_mts(&spec, 42).unwrap();
        assert_eq!(a.data.values(), b.data.values());
        assert_eq!(a.manifest.plantings, b.manifest.plantings);
        let c = synth_mts(&spec, 43).unwrap();
        assert_ne!(a.data.values(), c.data.values());
    }

    #[test]
    fn noiseless_identical_groups_have_unit_cosine() {
        let spec = SynthSpec::pure_sines(6, 2000, 2);
        let out = synth_mts(&spec, 7).unwrap();
        let g0 = &out.manifest.groups[0];
        let a = out.data.node_channel(g0[0], 0);
        let b = out.data.node_channel(g0[1], 0);
        assert!(cosine(&a, &b) > 1.0 - 1e-6);
        // across groups the phases differ
        let other = out.manifest.groups[1][0];
        let c = out.data.node_channel(other, 0);
        assert!(cosine(&a, &c) < 0.99);
    }

    #[test]
    fn default_spec_plants_at_least_one_motif_per_node() {
        let out = synth_mts(&SynthSpec::default_spec(), 11).unwrap();
        assert_eq!(out.data.n_nodes(), 8);
        assert_eq!(out.data.t_len(), 4000);
        for node in 0..8 {
            let count = out
                .manifest
                .plantings
                .iter()
                .filter(|p| p.node == node)
                .count();
            assert!(count >= 1, "node {node} has no plantings");
        }
    }

    #[test]
    fn motif_too_long_is_a_config_error() {
        let mut spec = SynthSpec::default_spec();
        spec.motif_len = spec.t_len + 1;
        assert!(synth_mts(&spec, 0).is_err());
    }

    #[test]
    fn lags_shift_the_fast_component_only() {
        let mut spec = SynthSpec::lagged_groups(4, 1000, 1);
        spec.noise_sigma = 0.0;
        spec.scale_jitter = 0.0;
        spec.n_motifs = 0;
        spec.sine_periods = Vec::new(); // isolate the lagged component
        let out = synth_mts(&spec, 3).unwrap();
        let lag = out.manifest.lags[1];
        assert!(lag > 0);
        let leader = out.data.node_channel(0, 0);
        let follower = out.data.node_channel(1, 0);
        // follower(t) == leader(t - lag)
        for t in lag..1000 {
            assert!(
                (follower[t] - leader[t - lag]).abs() < 1e-5,
                "t={t} lag={lag}"
            );
        }

        // with the periodic base restored, the groups stay aligned at lag 0
        let spec2 = SynthSpec {
            sine_periods: vec![(24.0, 1.0)],
            noise_base_amp: 0.0,
            ..spec
        };
        let out2 = synth_mts(&spec2, 3).unwrap();
        let a = out2.data.node_channel(0, 0);
        let b = out2.data.node_channel(3, 0);
        for t in 0..1000 {
            assert!((a[t] - b[t]).abs() < 1e-5, "sines must not lag");
        }
    }
}
