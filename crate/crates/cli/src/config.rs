//! Pipeline configuration file (TOML). Every section is optional and falls
//! back to the library defaults; command-line flags override file values.

use std::path::{Path, PathBuf};

use cogshift::csv_trainer::TrainConfig;
use cogshift::model::pretrain::PretrainConfig;
use cogshift::model::ModelConfig;
use cogshift::retrieval::RetrievalConfig;
use cogshift::tagger::TaggerConfig;
use serde::Deserialize;

use crate::UsageError;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub tagger: TaggerConfig,
    pub retrieval: RetrievalConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub probe: ProbeConfig,
    pub bench: BenchConfig,
}

/// Artifact locations, relative to the working directory.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub tagger: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub icl: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub d_img: usize,
    pub clusters: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 50,
            d_img: 16,
            clusters: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// When unset, `ingest` keeps the splits already present in the file.
    pub train_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            max_new_tokens: 40,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// 1-based block index; the top block when unset.
    pub layer: Option<usize>,
    pub top_pairs: usize,
    /// Categories left out of the within/between groups.
    pub skip: Vec<String>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            layer: None,
            top_pairs: 5,
            skip: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Records timed per configuration.
    pub limit: usize,
    /// Each timing is the minimum over this many runs.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { limit: 10, repeats: 3 }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError::MissingArtifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, UsageError> {
        let de = toml::Deserializer::parse(text).map_err(|e| UsageError::Config {
            field: String::new(),
            message: e.message().to_string(),
        })?;
        serde_path_to_error::deserialize(de).map_err(|e| UsageError::Config {
            field: e.path().to_string(),
            message: e.inner().message().to_string(),
        })
    }
}
