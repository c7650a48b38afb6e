//! Run configuration: one JSON document, with command-line flags on top.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use selfie_core::data::synth::{PlantedSpec, TeacherSpec};
use selfie_core::data::SplitSpec;
use selfie_core::eval::{BaselineMode, EvalConfig};
use selfie_core::lm::{BackendConfig, Sampling, TargetTemplate};
use selfie_core::probe::{HeatmapConfig, NovelConfig};
use selfie_core::train::TrainConfig;
use selfie_core::AdapterKind;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backend: BackendConfig,
    /// When set, replaces every per-section seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub adapter: AdapterKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub template: TargetTemplate,
    pub data: DataSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub probe: ProbeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::default(),
            seed: None,
            out: PathBuf::from("run"),
            adapter: AdapterKind::FullRank,
            checkpoint: None,
            template: TargetTemplate::default(),
            data: DataSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            probe: ProbeSection::default(),
        }
    }
}

/// Generated toy tasks, used instead of dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum SyntheticTask {
    Planted(PlantedSpec),
    Teacher(TeacherSpec),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
    /// Held-out evaluation set; the validation set is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<PathBuf>,
    /// Window-calibration subset, disjoint from the evaluation set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<PathBuf>,
    /// One manifest split by id into train/val/test.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    #[serde(flatten)]
    pub config: EvalConfig,
    pub baselines: Vec<BaselineMode>,
    /// Train each of these kinds and write a sweep table instead of evaluating
    /// a checkpoint.
    pub sweep: Vec<AdapterKind>,
    /// JSON map from stored label to paraphrases.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paraphrases: Option<PathBuf>,
    /// JSON map from latent name to keywords, for the keyword oracle. Latents
    /// without an entry use the words of their first label.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keywords: Option<PathBuf>,
    /// JSON list of fixed conversation texts. Without it, conversations are
    /// generated by the backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conversations: Option<PathBuf>,
    pub embedder_dim: usize,
    pub embedder_ngram: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            config: EvalConfig::default(),
            baselines: Vec::new(),
            sweep: Vec::new(),
            paraphrases: None,
            keywords: None,
            conversations: None,
            embedder_dim: 4096,
            embedder_ngram: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cases: Option<PathBuf>,
    /// Layers for the bridge heatmap; all layers when empty.
    pub layers: Vec<usize>,
    /// Token positions; every prompt position when empty.
    pub positions: Vec<usize>,
    pub heatmap: HeatmapConfig,
    /// Also run the untrained method for the contingency table.
    pub untrained: bool,
    pub zero_samples: usize,
    pub zero_sampling: Sampling,
    pub max_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub layer: usize,
    pub novel: NovelConfig,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            cases: None,
            layers: Vec::new(),
            positions: Vec::new(),
            heatmap: HeatmapConfig::default(),
            untrained: true,
            zero_samples: 5,
            zero_sampling: Sampling::temperature(0.7),
            max_tokens: selfie_core::lm::DEFAULT_MAX_TOKENS,
            prompt: None,
            layer: 0,
            novel: NovelConfig::default(),
        }
    }
}

/// Values given on the command line. Flags win over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub backend: Option<String>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Defaults, then the config file, then flags; then the global seed.
    pub fn resolve(path: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if flags.seed.is_some() {
            cfg.seed = flags.seed;
        }
        if let Some(o) = &flags.out {
            cfg.out = o.clone();
        }
        if let Some(b) = &flags.backend {
            cfg.backend.name = b.clone();
        }
        if flags.checkpoint.is_some() {
            cfg.checkpoint = flags.checkpoint.clone();
        }
        if let Some(s) = cfg.seed {
            cfg.train.seed = s;
            cfg.eval.config.generation.seed = s;
            cfg.probe.heatmap.seed = s;
            cfg.probe.novel.seed = s;
            if let Some(split) = cfg.data.split.as_mut() {
                split.seed = s;
            }
            match cfg.data.synthetic.as_mut() {
                Some(SyntheticTask::Planted(p)) => p.seed = s,
                Some(SyntheticTask::Teacher(t)) => t.seed = s,
                None => {}
            }
        }
        Ok(cfg)
    }
}

/// Read a JSON file into `T`, attributing failures to the path.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub type KeywordMap = BTreeMap<String, Vec<String>>;
