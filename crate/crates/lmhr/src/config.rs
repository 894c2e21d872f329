//! Run configuration: one TOML document covering data, model, retrieval,
//! graph, optimizer, training-loop and ablation settings, with defaults
//! mirroring the traffic profile (L = 2016, L_s = 12, l = 8, d = 96,
//! K_n = 5, K_s = 10, lr = 0.001).

use crate::aggregator::AggregatorConfig;
use crate::backend::{BackendConfig, BackendKind};
use crate::data::segment_layout;
use crate::encoder::EncoderConfig;
use crate::error::{LmhrError, Result};
use crate::graph::GraphConfig;
use crate::numerics::optim::AdamHyper;
use crate::retriever::RetrieverConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// One switch per architectural deletion of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_aggregator: bool,
    pub use_hp_branch: bool,
    pub use_stgnn: bool,
    pub use_graph_learning: bool,
    /// non-overlapping segmentation (stride forced to the segment length)
    pub hard_break: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_aggregator: true,
            use_hp_branch: true,
            use_stgnn: true,
            use_graph_learning: true,
            hard_break: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub dataset: String,
    /// sample rate assumed for CSV files lacking metadata
    pub csv_sample_rate_min: u32,
    pub split: (f64, f64, f64),
    pub per_node_stats: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dataset: String::new(),
            csv_sample_rate_min: 5,
            split: (0.7, 0.1, 0.2),
            per_node_stats: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// long-history length
    pub l: usize,
    /// segment length
    pub l_s: usize,
    /// segment stride (non-overlap length)
    pub stride: usize,
    /// forecast horizon
    pub t_f: usize,
    /// representation width
    pub d: usize,
    pub heads: usize,
    pub fusion_hidden: usize,
    pub backend_width: usize,
    pub backend_blocks: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub pair_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            l: 2016,
            l_s: 12,
            stride: 8,
            t_f: 12,
            d: 96,
            heads: 4,
            fusion_hidden: 256,
            backend_width: 32,
            backend_blocks: 3,
            conv_channels: 16,
            conv_kernel: 5,
            pair_hidden: 64,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSection {
    pub k_n: usize,
    pub k_s: usize,
    pub exclude_self: bool,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection {
            k_n: 5,
            k_s: 10,
            exclude_self: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphSection {
    pub lambda: f64,
    pub tau: f64,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            lambda: 0.5,
            tau: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// stride between training windows
    pub window_stride: usize,
    /// stride between evaluation windows
    pub eval_window_stride: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            batch_size: 8,
            max_epochs: 100,
            patience: 15,
            window_stride: 1,
            eval_window_stride: 1,
            lr: 1e-3,
            weight_decay: 1e-5,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub retrieval: RetrievalSection,
    pub graph: GraphSection,
    pub training: TrainingSection,
    pub ablation: AblationFlags,
    pub backend: BackendKind,
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSection::default(),
            model: ModelSection::default(),
            retrieval: RetrievalSection::default(),
            graph: GraphSection::default(),
            training: TrainingSection::default(),
            ablation: AblationFlags::default(),
            backend: BackendKind::Reference,
            seed: 0,
            out_dir: "runs".to_string(),
        }
    }
}

/// The architecture-relevant subset whose hash guards checkpoint loads.
#[derive(Serialize)]
struct SemanticView<'a> {
    model: &'a ModelSection,
    retrieval: &'a RetrievalSection,
    graph: &'a GraphSection,
    ablation: &'a AblationFlags,
    backend: &'a BackendKind,
    split: (f64, f64, f64),
    per_node_stats: bool,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| LmhrError::config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Segment stride after the hard-break switch.
    pub fn effective_stride(&self) -> usize {
        if self.ablation.hard_break {
            self.model.l_s
        } else {
            self.model.stride
        }
    }

    /// Segment count for the configured history length.
    pub fn p_segments(&self) -> Result<usize> {
        let (p, _) = segment_layout(self.model.l, self.model.l_s, self.effective_stride())?;
        Ok(p)
    }

    /// Whether the hierarchical retriever can run for `n_nodes` series.
    pub fn retrieval_enabled(&self, n_nodes: usize) -> bool {
        self.retrieval.k_n >= 1 && self.retrieval.k_n < n_nodes && self.retrieval.k_s >= 1
    }

    pub fn effective_stgnn(&self) -> bool {
        self.ablation.use_stgnn && self.backend == BackendKind::Reference
    }

    /// Validate everything checkable without the dataset. Returns warnings
    /// worth surfacing (not failures).
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        let m = &self.model;
        if m.t_f == 0 {
            return Err(LmhrError::config("t_f must be >= 1"));
        }
        let (p, _) = segment_layout(m.l, m.l_s, self.effective_stride())?;
        if m.d == 0 || m.heads == 0 || m.d % m.heads != 0 {
            return Err(LmhrError::config(format!(
                "d = {} must be divisible by heads = {}",
                m.d, m.heads
            )));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(LmhrError::config("dropout must be in [0, 1)"));
        }
        let s = self.data.split;
        if (s.0 + s.1 + s.2 - 1.0).abs() > 1e-6 {
            return Err(LmhrError::config(format!(
                "split ratios sum to {}, not 1",
                s.0 + s.1 + s.2
            )));
        }
        if self.graph.lambda < 0.0 {
            return Err(LmhrError::config("lambda must be >= 0"));
        }
        if self.graph.tau <= 0.0 {
            return Err(LmhrError::config("tau must be > 0"));
        }
        if self.training.batch_size == 0 || self.training.max_epochs == 0 {
            return Err(LmhrError::config("batch size and max epochs must be >= 1"));
        }
        if self.training.window_stride == 0 || self.training.eval_window_stride == 0 {
            return Err(LmhrError::config("window strides must be >= 1"));
        }
        if self.training.lr <= 0.0 {
            return Err(LmhrError::config("learning rate must be > 0"));
        }
        let f = &self.ablation;
        if !f.use_aggregator && !f.use_hp_branch && !self.effective_stgnn() {
            return Err(LmhrError::config(
                "all fusion branches disabled; nothing would be learned",
            ));
        }
        // the published electricity settings disagree with the segment-count
        // formula; surface it rather than silently diverging
        if (m.l, m.l_s, self.effective_stride()) == (168, 24, 12) && p != 12 {
            warnings.push(format!(
                "electricity-profile segmentation (L=168, L_s=24, l=12) yields P = {p}, \
                 not the published 12; the formula is used as written"
            ));
        }
        Ok(warnings)
    }

    /// Validate constraints that depend on the loaded dataset.
    pub fn validate_with_data(&self, n_nodes: usize, t_len: usize) -> Result<()> {
        let splits = crate::data::split_dataset(t_len, self.data.split)?;
        let need = self.model.l + self.model.t_f;
        if splits.train.len() < need {
            return Err(LmhrError::config(format!(
                "training split of {} steps cannot fit history {} + horizon {}",
                splits.train.len(),
                self.model.l,
                self.model.t_f
            )));
        }
        if self.retrieval_enabled(n_nodes) {
            let p = self.p_segments()?;
            RetrieverConfig {
                k_n: self.retrieval.k_n,
                k_s: self.retrieval.k_s,
                exclude_self: self.retrieval.exclude_self,
            }
            .validate(n_nodes, p)?;
        } else {
            if self.ablation.use_graph_learning {
                return Err(LmhrError::config(format!(
                    "graph learning needs the retrieval adjacency, but retrieval is \
                     infeasible for K_n = {} with N = {n_nodes}",
                    self.retrieval.k_n
                )));
            }
            if self.ablation.use_aggregator && self.retrieval.k_s != 0 {
                return Err(LmhrError::config(format!(
                    "aggregator expects K_s = {} retrieved tokens but retrieval is \
                     infeasible for K_n = {} with N = {n_nodes}; set k_s = 0",
                    self.retrieval.k_s, self.retrieval.k_n
                )));
            }
        }
        Ok(())
    }

    pub fn encoder_config(&self, n_channels: usize) -> Result<EncoderConfig> {
        Ok(EncoderConfig {
            d: self.model.d,
            heads: self.model.heads,
            l_s: self.model.l_s,
            n_channels,
            max_p: self.p_segments()?,
            dropout: self.model.dropout,
        })
    }

    pub fn aggregator_config(&self, n_nodes: usize) -> AggregatorConfig {
        AggregatorConfig {
            d: self.model.d,
            heads: self.model.heads,
            k_s: if self.retrieval_enabled(n_nodes) {
                self.retrieval.k_s
            } else {
                0
            },
            dropout: self.model.dropout,
        }
    }

    pub fn retriever_config(&self) -> RetrieverConfig {
        RetrieverConfig {
            k_n: self.retrieval.k_n,
            k_s: self.retrieval.k_s,
            exclude_self: self.retrieval.exclude_self,
        }
    }

    pub fn graph_config(&self, n_channels: usize) -> GraphConfig {
        GraphConfig {
            d: self.model.d,
            conv_channels: self.model.conv_channels,
            conv_kernel: self.model.conv_kernel,
            pair_hidden: self.model.pair_hidden,
            tau: self.graph.tau,
            n_channels,
        }
    }

    pub fn backend_config(&self, n_channels: usize) -> BackendConfig {
        BackendConfig {
            d: self.model.d,
            width: self.model.backend_width,
            n_blocks: self.model.backend_blocks,
            l_s: self.model.l_s,
            n_channels,
        }
    }

    pub fn adam_hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.training.lr,
            weight_decay: self.training.weight_decay,
            eps: self.training.adam_eps,
            ..AdamHyper::default()
        }
    }

    /// Hash of the architecture-relevant fields. Seed and paths stay out so
    /// the same weights layout always hashes identically.
    pub fn semantic_hash(&self) -> String {
        let view = SemanticView {
            model: &self.model,
            retrieval: &self.retrieval,
            graph: &self.graph,
            ablation: &self.ablation,
            backend: &self.backend,
            split: self.data.split,
            per_node_stats: self.data.per_node_stats,
        };
        let json = serde_json::to_vec(&view).expect("config hashes");
        hex_digest(&json)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_traffic_profile() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.l, 2016);
        assert_eq!(cfg.model.l_s, 12);
        assert_eq!(cfg.model.stride, 8);
        assert_eq!(cfg.model.d, 96);
        assert_eq!(cfg.retrieval.k_n, 5);
        assert_eq!(cfg.retrieval.k_s, 10);
        assert_eq!(cfg.training.lr, 1e-3);
        assert_eq!(cfg.p_segments().unwrap(), 252);
        assert!(cfg.validate().unwrap().is_empty());
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);

        let partial = r#"
seed = 9
[model]
l = 96
d = 32
[training]
batch_size = 4
"#;
        let c = RunConfig::from_toml_str(partial).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.l, 96);
        assert_eq!(c.model.d, 32);
        assert_eq!(c.model.l_s, 12);
        assert_eq!(c.training.batch_size, 4);
    }

    #[test]
    fn electricity_profile_warns_about_segment_count() {
        let mut cfg = RunConfig::default();
        cfg.model.l = 168;
        cfg.model.l_s = 24;
        cfg.model.stride = 12;
        let warnings = cfg.validate().unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("P = 14"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model.d = 97;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.data.split = (0.7, 0.2, 0.2);
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.ablation.use_aggregator = false;
        cfg.ablation.use_hp_branch = false;
        cfg.ablation.use_stgnn = false;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.graph.tau = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hard_break_changes_stride_and_hash() {
        let mut cfg = RunConfig::default();
        let h1 = cfg.semantic_hash();
        assert_eq!(cfg.effective_stride(), 8);
        cfg.ablation.hard_break = true;
        assert_eq!(cfg.effective_stride(), 12);
        assert_ne!(cfg.semantic_hash(), h1);
        // seed does not participate in the hash
        let mut cfg2 = RunConfig::default();
        cfg2.seed = 123;
        assert_eq!(cfg2.semantic_hash(), h1);
    }

    #[test]
    fn data_dependent_validation() {
        let mut cfg = RunConfig::default();
        cfg.model.l = 96;
        cfg.retrieval.k_n = 2;
        cfg.retrieval.k_s = 4;
        // 8 nodes, plenty of data
        cfg.validate_with_data(8, 4000).unwrap();
        // too few nodes for K_n while graph learning needs the adjacency
        assert!(cfg.validate_with_data(2, 4000).is_err());
        // dataset too short
        assert!(cfg.validate_with_data(8, 100).is_err());
    }
}
