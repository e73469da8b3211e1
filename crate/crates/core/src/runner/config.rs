//! Experiment configuration: one TOML file, every section required.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusSpec;
use crate::decode::DecodeConfig;
use crate::error::{KestError, Result};
use crate::evaluation::verify::Precision;
use crate::evaluation::{EvalConfig, EvaluatorSettings};
use crate::model::ModelConfig;
use crate::selftrain::{Mode, STConfig};

/// Overrides the default output root (`runs`).
pub const OUT_ROOT_ENV: &str = "KEST_OUT_DIR";

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Model shape; vocabulary size and class count come from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_label: usize,
    pub d_ff: usize,
    pub cls_hidden: usize,
    pub l_max: usize,
    pub dropout_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_label: m.d_label,
            d_ff: m.d_ff,
            cls_hidden: m.cls_hidden,
            l_max: m.l_max,
            dropout_rate: m.dropout_rate,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, vocab_size: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_label: self.d_label,
            d_ff: self.d_ff,
            cls_hidden: self.cls_hidden,
            vocab_size,
            num_classes,
            l_max: self.l_max,
            dropout_rate: self.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub labeled_fraction: f64,
    /// |D_u| / |D_l|.
    pub unlabeled_ratio: usize,
    /// Fixed across experiment seeds so every seed sees the same data.
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { labeled_fraction: 0.02, unlabeled_ratio: 30, seed: 11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    /// Training precision.
    pub precision: Precision,
    pub corpus: CorpusSpec,
    pub split: SplitConfig,
    pub model: ModelSection,
    pub selftrain: STConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub evaluator: EvaluatorSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            seeds: vec![1, 2, 3, 4, 5],
            modes: vec![Mode::Kest, Mode::Pt, Mode::PtSelectPl, Mode::Supervised],
            precision: Precision::F32,
            corpus: CorpusSpec { num_examples: 1500, ..CorpusSpec::default() },
            split: SplitConfig::default(),
            model: ModelSection::default(),
            selftrain: STConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            evaluator: EvaluatorSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| KestError::config(e.to_string().trim_end().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KestError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            KestError::Config(m) => KestError::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| KestError::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(KestError::config("name must be non-empty and use only [A-Za-z0-9_-]"));
        }
        if self.seeds.is_empty() {
            return Err(KestError::config("seeds must not be empty"));
        }
        if self.modes.is_empty() {
            return Err(KestError::config("modes must not be empty"));
        }
        self.corpus.validate(self.model.l_max)?;
        if !(self.split.labeled_fraction > 0.0 && self.split.labeled_fraction <= 1.0) {
            return Err(KestError::config("split.labeled_fraction must lie in (0, 1]"));
        }
        // Vocabulary size only affects the embedding shape, so any positive
        // placeholder validates the rest of the model section.
        self.model.resolve(self.corpus.vocab_size, self.corpus.num_attributes).validate()?;
        self.selftrain.validate()?;
        self.decode.validate(self.model.l_max)?;
        self.eval.validate()?;
        self.evaluator.validate()
    }

    /// Sorted-key JSON; stable under field reordering in the source file.
    pub fn canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&value)?)
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    /// Hash of the data-defining sections only; runs with equal corpus
    /// hashes are comparable.
    pub fn corpus_hash(&self) -> Result<String> {
        let value = serde_json::json!({ "corpus": self.corpus, "split": self.split, "l_max": self.model.l_max });
        Ok(hex::encode(Sha256::digest(serde_json::to_string(&value)?.as_bytes())))
    }

    /// `<name>-<first 8 hash chars>`.
    pub fn run_dir_name(&self) -> Result<String> {
        Ok(format!("{}-{}", self.name, &self.hash()?[..8]))
    }
}
