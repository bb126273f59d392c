//! Experiment configuration in TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attacks::{self, AttackKind, AttackSpec, PruneScope};
use crate::keying::{generate_key, KeyingError, Level, SecretKey};
use crate::nn::{load_cifar, load_idx, ArchitectureSpec, Hyper, LabeledDataset, NnError, Optimizer};
use crate::watermark::{EmbedConfig, DEFAULT_MAX_FRACTION};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown architecture preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("dataset file {path}: {source}")]
    Dataset { path: PathBuf, source: NnError },
    #[error(transparent)]
    Keying(#[from] KeyingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Idx,
    Cifar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub format: DatasetFormat,
    /// IDX: image and label file. CIFAR: one or more batch files.
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub test: Vec<PathBuf>,
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkConfig {
    pub s: usize,
    pub level: Level,
    #[serde(default)]
    pub selection_seed: u64,
    /// Reproducible key; a fresh random key when neither this nor `key_file` is set.
    #[serde(default)]
    pub key_seed: Option<u64>,
    #[serde(default)]
    pub key_file: Option<PathBuf>,
    #[serde(default = "default_fraction")]
    pub max_fraction: f64,
}

fn default_fraction() -> f64 {
    DEFAULT_MAX_FRACTION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default)]
    pub momentum: f32,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

fn default_lr() -> f32 {
    1e-3
}

fn default_batch() -> usize {
    64
}

impl TrainConfig {
    pub fn hyper(&self) -> Hyper {
        Hyper {
            optimizer: match self.optimizer {
                OptimizerKind::Adam => Optimizer::adam(self.lr),
                OptimizerKind::Sgd => Optimizer::sgd(self.lr, self.momentum),
            },
            epochs: self.epochs,
            batch: self.batch,
            frozen_layers: 0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteKind {
    /// The thirty-attack suite.
    Default,
    /// Extreme-pruning rate grid over all layers.
    PruneGlobalGrid,
    /// Extreme-pruning rate grid over dense layers.
    PruneFcGrid,
    Quantization,
    Jpeg,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "default_suite")]
    pub suites: Vec<SuiteKind>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ft_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "default_ft_lr")]
    pub finetune_lr: f32,
}

fn default_suite() -> Vec<SuiteKind> {
    vec![SuiteKind::Default]
}

fn default_repeats() -> usize {
    attacks::DEFAULT_REPEATS
}

fn default_ft_epochs() -> usize {
    30
}

fn default_ft_lr() -> f32 {
    1e-5
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            suites: default_suite(),
            repeats: default_repeats(),
            seed: 0,
            finetune_epochs: default_ft_epochs(),
            finetune_lr: default_ft_lr(),
        }
    }
}

impl AttackConfig {
    pub fn specs(&self) -> Vec<AttackSpec> {
        let ft = AttackKind::Finetune {
            lr: self.finetune_lr,
            epochs: self.finetune_epochs,
            batch: 64,
        };
        let mut out = Vec::new();
        for suite in &self.suites {
            match suite {
                SuiteKind::Default => {
                    let mut d = attacks::default_suite(self.repeats, self.seed);
                    for spec in d.iter_mut() {
                        if matches!(spec.kind, AttackKind::Finetune { .. }) {
                            spec.kind = ft.clone();
                        }
                    }
                    out.extend(d);
                }
                SuiteKind::PruneGlobalGrid => out.extend(attacks::prune_sweep(
                    PruneScope::Global,
                    &attacks::pruning_grid(),
                    self.repeats,
                    self.seed,
                )),
                SuiteKind::PruneFcGrid => out.extend(attacks::prune_sweep(
                    PruneScope::FcOnly,
                    &attacks::pruning_grid(),
                    self.repeats,
                    self.seed,
                )),
                SuiteKind::Quantization => {
                    for kind in [
                        AttackKind::QuantDynamic,
                        AttackKind::QuantFullint,
                        AttackKind::QuantFloat16,
                    ] {
                        out.push(AttackSpec::new(kind, 1, self.seed));
                    }
                }
                SuiteKind::Jpeg => {
                    for quality in attacks::jpeg_grid() {
                        out.push(AttackSpec::new(AttackKind::Jpeg { quality }, 1, self.seed));
                    }
                }
                SuiteKind::Finetune => out.push(AttackSpec::new(ft.clone(), 1, self.seed)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub watermark: WatermarkConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Loaded corpus: training data with its split, plus the held-out test set.
pub struct Corpus {
    pub data: LabeledDataset,
    pub test: LabeledDataset,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 of the normalised TOML form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn spec(&self) -> Result<ArchitectureSpec, ConfigError> {
        ArchitectureSpec::preset(&self.model.preset)
            .ok_or_else(|| ConfigError::UnknownPreset(self.model.preset.clone()))
    }

    pub fn key(&self) -> Result<SecretKey, ConfigError> {
        match (&self.watermark.key_file, self.watermark.key_seed) {
            (Some(path), _) => Ok(SecretKey::read_file(path)?),
            (None, seed) => Ok(generate_key(seed)),
        }
    }

    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig {
            s: self.watermark.s,
            level: self.watermark.level,
            selection_seed: self.watermark.selection_seed,
            model_seed: self.model.seed,
            hyper: self.train.hyper(),
            max_fraction: self.watermark.max_fraction,
            probe: true,
        }
    }

    pub fn load_corpus(&self) -> Result<Corpus, ConfigError> {
        let d = &self.dataset;
        let data = load_files(d.format, &d.train, d.limit)?.with_split(d.split_seed);
        let test = if d.test.is_empty() {
            LabeledDataset::new(Vec::new(), Vec::new(), data.classes()).expect("empty dataset is valid")
        } else {
            load_files(d.format, &d.test, d.test_limit)?
        };
        Ok(Corpus { data, test })
    }
}

fn load_files(format: DatasetFormat, files: &[PathBuf], limit: Option<usize>) -> Result<LabeledDataset, ConfigError> {
    for f in files {
        if !f.is_file() {
            return Err(ConfigError::Dataset {
                path: f.clone(),
                source: NnError::Io("no such file".into()),
            });
        }
    }
    let first = files.first().cloned().unwrap_or_default();
    let wrap = |source| ConfigError::Dataset {
        path: first.clone(),
        source,
    };
    match format {
        DatasetFormat::Idx => {
            if files.len() != 2 {
                return Err(ConfigError::Invalid(
                    "IDX datasets need an image file and a label file".into(),
                ));
            }
            load_idx(&files[0], &files[1], limit).map_err(wrap)
        }
        DatasetFormat::Cifar => {
            let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
            load_cifar(&refs, limit).map_err(wrap)
        }
    }
}
