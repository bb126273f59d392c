//! Trigger selection, label injection, embedding and recovery measurement.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ImageError};
use crate::keying::{self, Binding, KeyingError, LabelAssignment, Level, SecretKey, IMAGE_TAG};
use crate::nn::{self, ArchitectureSpec, Hyper, LabeledDataset, LayerSpec, Model, NnError, ParamKind, Split};
use crate::oracle::{Classifier, OracleError};
use crate::stats::{self, RarityResult, StatsError};

/// Default upper bound on `s / n`.
pub const DEFAULT_MAX_FRACTION: f64 = 0.05;

const TRIGGER_MAGIC: &[u8; 8] = b"TMTRIGS\0";
const TRIGGER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WatermarkError {
    #[error("{s} triggers exceed the cap of {cap} for {n} training samples")]
    TooManyTriggers { s: usize, n: usize, cap: usize },
    #[error("no training samples to select triggers from")]
    EmptyDataset,
    #[error("trigger labels have not been assigned")]
    LabelsUnset,
    #[error("trigger labels use {triggers} classes, dataset has {data}")]
    ClassMismatch { triggers: u32, data: u32 },
    #[error("trigger {0} does not match its corpus sample")]
    NotFromCorpus(usize),
    #[error("trigger labels are inconsistent with the key")]
    LabelMismatch,
    #[error("malformed trigger file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Keying(#[from] KeyingError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// The owner's secret trigger pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSet {
    pub selection_seed: u64,
    /// Size of the corpus the triggers were drawn from.
    pub corpus_len: usize,
    pub indices: Vec<usize>,
    pub images: Vec<Image>,
    /// True classes, kept for reporting.
    pub original_labels: Vec<u32>,
    pub labels: Option<LabelAssignment>,
    pub key_id: Option<String>,
}

impl TriggerSet {
    pub fn s(&self) -> usize {
        self.indices.len()
    }

    pub fn fraction(&self) -> f64 {
        if self.corpus_len == 0 {
            0.0
        } else {
            self.s() as f64 / self.corpus_len as f64
        }
    }

    pub fn level(&self) -> Option<Level> {
        self.labels.as_ref().map(|l| l.level)
    }

    pub fn assignment(&self) -> Result<&LabelAssignment, WatermarkError> {
        self.labels.as_ref().ok_or(WatermarkError::LabelsUnset)
    }

    /// Derive and attach the key's labels for `level`.
    pub fn assign_labels(&mut self, key: &SecretKey, level: Level, classes: u32) -> Result<(), WatermarkError> {
        let labels = if self.images.is_empty() {
            LabelAssignment {
                level,
                classes,
                labels: Vec::new(),
                binding: match level {
                    Level::Zero => Binding::CounterStream,
                    Level::One => Binding::PerImage,
                    Level::Two => Binding::Joint { digest: String::new() },
                },
            }
        } else {
            keying::labels_for_level(level, &self.images, key, classes)?
        };
        self.labels = Some(labels);
        self.key_id = Some(key.key_id());
        Ok(())
    }

    /// Re-derive the labels from `key` and compare with the attached ones.
    pub fn check_labels(&self, key: &SecretKey) -> Result<(), WatermarkError> {
        let have = self.assignment()?;
        if self.images.is_empty() {
            return Ok(());
        }
        let want = keying::labels_for_level(have.level, &self.images, key, have.classes)?;
        if &want != have {
            return Err(WatermarkError::LabelMismatch);
        }
        Ok(())
    }

    /// `(image, label)` pairs; empty when labels are unset.
    pub fn pairs(&self) -> Vec<(Image, u32)> {
        match &self.labels {
            Some(a) => self.images.iter().cloned().zip(a.labels.iter().copied()).collect(),
            None => Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = TriggerHeader {
            selection_seed: self.selection_seed,
            corpus_len: self.corpus_len,
            s: self.s(),
            indices: self.indices.clone(),
            original_labels: self.original_labels.clone(),
            labels: self.labels.clone(),
            key_id: self.key_id.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(TRIGGER_MAGIC);
        out.extend_from_slice(&TRIGGER_VERSION.to_be_bytes());
        out.extend_from_slice(&(json.len() as u32).to_be_bytes());
        out.extend_from_slice(&json);
        for img in &self.images {
            out.extend_from_slice(&keying::canonical_bytes(img));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WatermarkError> {
        let bad = |m: &str| WatermarkError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != TRIGGER_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_be_bytes(bytes[8..12].try_into().unwrap());
        if version != TRIGGER_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_be_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: TriggerHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let mut rest = &bytes[16 + hlen..];
        let mut images = Vec::with_capacity(header.s);
        for _ in 0..header.s {
            let (img, used) = read_canonical(rest)?;
            images.push(img);
            rest = &rest[used..];
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        if header.indices.len() != header.s || header.original_labels.len() != header.s {
            return Err(bad("field lengths disagree with s"));
        }
        if let Some(a) = &header.labels {
            if a.labels.len() != header.s {
                return Err(bad("label count disagrees with s"));
            }
        }
        Ok(Self {
            selection_seed: header.selection_seed,
            corpus_len: header.corpus_len,
            indices: header.indices,
            images,
            original_labels: header.original_labels,
            labels: header.labels,
            key_id: header.key_id,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), WatermarkError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, WatermarkError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct TriggerHeader {
    selection_seed: u64,
    corpus_len: usize,
    s: usize,
    indices: Vec<usize>,
    original_labels: Vec<u32>,
    labels: Option<LabelAssignment>,
    key_id: Option<String>,
}

/// Split one canonical image off the front of `bytes`.
pub(crate) fn read_canonical(bytes: &[u8]) -> Result<(Image, usize), WatermarkError> {
    if bytes.len() < 16 || &bytes[..4] != IMAGE_TAG {
        return Err(WatermarkError::Format("bad image record".into()));
    }
    let dim = |i: usize| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let len = dim(0)
        .checked_mul(dim(1))
        .and_then(|v| v.checked_mul(dim(2)))
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| WatermarkError::Format("image dimensions overflow".into()))?;
    let record = bytes
        .get(..len)
        .ok_or_else(|| WatermarkError::Format("truncated image record".into()))?;
    Ok((keying::image_from_canonical(record)?, len))
}

/// Match count of a classifier on the triggers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub m: usize,
    pub s: usize,
    pub rec: f64,
    pub rarity: RarityResult,
}

/// [`select_triggers_capped`] with the default 5% cap.
pub fn select_triggers(data: &LabeledDataset, s: usize, selection_seed: u64) -> Result<TriggerSet, WatermarkError> {
    select_triggers_capped(data, s, selection_seed, DEFAULT_MAX_FRACTION)
}

/// Draw `s` distinct training-split samples with a seeded permutation.
pub fn select_triggers_capped(
    data: &LabeledDataset,
    s: usize,
    selection_seed: u64,
    max_fraction: f64,
) -> Result<TriggerSet, WatermarkError> {
    let pool = data.indices(Split::Train);
    if pool.is_empty() {
        return Err(WatermarkError::EmptyDataset);
    }
    let n = pool.len();
    let cap = (max_fraction * n as f64).floor() as usize;
    if s > cap.min(n) {
        return Err(WatermarkError::TooManyTriggers { s, n, cap });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(selection_seed);
    let indices: Vec<usize> = sample(&mut rng, n, s).into_iter().map(|k| pool[k]).collect();
    Ok(TriggerSet {
        selection_seed,
        corpus_len: data.len(),
        images: indices.iter().map(|&i| data.image(i).clone()).collect(),
        original_labels: indices.iter().map(|&i| data.label(i)).collect(),
        indices,
        labels: None,
        key_id: None,
    })
}

/// Copy of `data` with every trigger sample relabelled.
pub fn inject(data: &LabeledDataset, triggers: &TriggerSet) -> Result<LabeledDataset, WatermarkError> {
    let a = triggers.assignment()?;
    if a.classes != data.classes() {
        return Err(WatermarkError::ClassMismatch {
            triggers: a.classes,
            data: data.classes(),
        });
    }
    let mut labels = data.labels().to_vec();
    for (k, &i) in triggers.indices.iter().enumerate() {
        if i >= data.len() || data.image(i) != &triggers.images[k] {
            return Err(WatermarkError::NotFromCorpus(k));
        }
        labels[i] = a.labels[k];
    }
    Ok(data.with_labels(labels)?)
}

/// Parameters of one embedding run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub s: usize,
    pub level: Level,
    pub selection_seed: u64,
    pub model_seed: u64,
    pub hyper: Hyper,
    pub max_fraction: f64,
    /// Log trigger recovery after every epoch.
    pub probe: bool,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            s: 40,
            level: Level::Two,
            selection_seed: 0,
            model_seed: 0,
            hyper: Hyper::default(),
            max_fraction: DEFAULT_MAX_FRACTION,
            probe: true,
        }
    }
}

fn select_and_label(
    data: &LabeledDataset,
    key: &SecretKey,
    cfg: &EmbedConfig,
) -> Result<(LabeledDataset, TriggerSet), WatermarkError> {
    let mut triggers = select_triggers_capped(data, cfg.s, cfg.selection_seed, cfg.max_fraction)?;
    triggers.assign_labels(key, cfg.level, data.classes())?;
    let marked = inject(data, &triggers)?;
    Ok((marked, triggers))
}

fn train_marked(
    init: &Model,
    marked: &LabeledDataset,
    triggers: &TriggerSet,
    hyper: &Hyper,
    probe: bool,
) -> Result<Model, WatermarkError> {
    let pairs = triggers.pairs();
    let probe = (probe && !pairs.is_empty()).then_some(pairs.as_slice());
    Ok(nn::train_with_probe(init, marked, hyper, probe)?)
}

/// Select triggers, label them from the key, inject, and train from scratch.
pub fn embed(
    data: &LabeledDataset,
    key: &SecretKey,
    spec: &ArchitectureSpec,
    cfg: &EmbedConfig,
) -> Result<(Model, TriggerSet), WatermarkError> {
    let (marked, triggers) = select_and_label(data, key, cfg)?;
    let init = Model::build(spec, cfg.model_seed)?;
    let model = train_marked(&init, &marked, &triggers, &cfg.hyper, cfg.probe)?;
    Ok((model, triggers))
}

/// Transfer-learning embedding: keep the donor's convolution stack frozen,
/// re-initialise the dense head for the target classes, and train the head
/// on the marked target data.
pub fn embed_transfer(
    donor: &Model,
    data: &LabeledDataset,
    key: &SecretKey,
    cfg: &EmbedConfig,
) -> Result<(Model, TriggerSet), WatermarkError> {
    let mut spec = donor.spec().clone();
    spec.classes = data.classes() as usize;
    if let Some(last) = spec.layers.last_mut() {
        *last = LayerSpec::head(spec.classes);
    }
    let first_dense = spec
        .layers
        .iter()
        .position(LayerSpec::is_dense)
        .ok_or_else(|| NnError::Spec("donor has no dense head".into()))?;
    let mut init = Model::build(&spec, cfg.model_seed)?;
    let info = init.param_info().to_vec();
    for (p, i) in info.iter().enumerate() {
        if i.kind == ParamKind::Conv {
            init.params_mut()[p] = donor.params()[p].clone();
        }
    }
    let (marked, triggers) = select_and_label(data, key, cfg)?;
    let hyper = Hyper {
        frozen_layers: first_dense,
        ..cfg.hyper.clone()
    };
    let model = train_marked(&init, &marked, &triggers, &hyper, cfg.probe)?;
    Ok((model, triggers))
}

/// Count black-box matches on the triggers and attach the rarity.
pub fn recovery_rate<C: Classifier + ?Sized>(
    oracle: &C,
    triggers: &TriggerSet,
) -> Result<RecoveryResult, WatermarkError> {
    let a = triggers.assignment()?;
    if let Some(c) = oracle.classes() {
        if c != a.classes as usize {
            return Err(WatermarkError::ClassMismatch {
                triggers: a.classes,
                data: c as u32,
            });
        }
    }
    let s = triggers.s();
    let mut m = 0usize;
    for (img, &label) in triggers.images.iter().zip(&a.labels) {
        m += usize::from(oracle.classify(img)? == label as usize);
    }
    Ok(RecoveryResult {
        m,
        s,
        rec: 100.0 * m as f64 / s.max(1) as f64,
        rarity: stats::rarity(s as u64, m as u64, a.classes as u64)?,
    })
}
