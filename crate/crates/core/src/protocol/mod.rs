//! Evidence bundles and black-box ownership verification.

mod wire;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::Image;
use crate::keying::{self, KeyingError, Level, SecretKey};
use crate::oracle::{Classifier, CountingOracle, OracleError};
use crate::stats::{self, StatsError};
use crate::watermark::{read_canonical, TriggerSet, WatermarkError};

pub use wire::{
    read_request, read_response, serve_connection, spawn_server, write_request, write_response, RemoteOracle,
    ServerHandle, MAX_REQUEST,
};

/// Rarity threshold for granting ownership, in bits.
pub const DEFAULT_R_MIN: f64 = 20.0;

const BUNDLE_MAGIC: &str = "trigmark-evidence 1";
const DIGEST_DOMAIN: &[u8] = b"trigmark/bundle/v1";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bundle digest does not match its contents")]
    Tampered,
    #[error("bundle claims {bundle} classes, oracle answers {oracle}")]
    ClassMismatch { bundle: u32, oracle: usize },
    #[error("trigger labels are inconsistent with the key; refusing to seal")]
    LabelMismatch,
    #[error("malformed bundle: {0}")]
    Format(String),
    #[error("verification aborted: {0}")]
    Aborted(#[from] OracleError),
    #[error(transparent)]
    Keying(#[from] KeyingError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Watermark(#[from] WatermarkError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl ProtocolError {
    /// Failures of the oracle itself, as opposed to bad evidence.
    pub fn is_transport(&self) -> bool {
        matches!(self, ProtocolError::Aborted(_))
    }
}

/// How the bundle ties labels to a key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Keying {
    /// The key itself; the verifier derives the labels.
    Disclosed(SecretKey),
    /// Precomputed labels and the key's public identifier.
    Withheld { labels: Vec<u32>, key_id: String },
}

/// The sealed package an owner hands to a verifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvidenceBundle {
    pub level: Level,
    pub classes: u32,
    /// Triggers in committed order.
    pub triggers: Vec<Image>,
    pub keying: Keying,
    /// Hex SHA-256 over every other field.
    pub digest: String,
}

impl EvidenceBundle {
    pub fn s(&self) -> usize {
        self.triggers.len()
    }

    pub fn key_id(&self) -> String {
        match &self.keying {
            Keying::Disclosed(k) => k.key_id(),
            Keying::Withheld { key_id, .. } => key_id.clone(),
        }
    }

    pub fn compute_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(DIGEST_DOMAIN);
        h.update([self.level.as_u8()]);
        h.update(self.classes.to_be_bytes());
        h.update((self.triggers.len() as u32).to_be_bytes());
        match &self.keying {
            Keying::Disclosed(k) => {
                h.update([1u8]);
                h.update(k.as_bytes());
            }
            Keying::Withheld { labels, key_id } => {
                h.update([0u8]);
                h.update((key_id.len() as u32).to_be_bytes());
                h.update(key_id.as_bytes());
                for l in labels {
                    h.update(l.to_be_bytes());
                }
            }
        }
        for img in &self.triggers {
            h.update(keying::canonical_bytes(img));
        }
        hex::encode(h.finalize())
    }

    pub fn digest_ok(&self) -> bool {
        self.digest == self.compute_digest()
    }

    /// Labels the verifier scores against: recomputed when the key is disclosed.
    pub fn effective_labels(&self) -> Result<Vec<u32>, ProtocolError> {
        match &self.keying {
            Keying::Disclosed(k) => Ok(keying::labels_for_level(self.level, &self.triggers, k, self.classes)?.labels),
            Keying::Withheld { labels, .. } => {
                if labels.len() != self.triggers.len() {
                    return Err(ProtocolError::Format("label count differs from trigger count".into()));
                }
                Ok(labels.clone())
            }
        }
    }

    /// Text header, a blank line, then the canonical trigger images back to back.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!(
            "{BUNDLE_MAGIC}\nlevel = {}\ns = {}\nclasses = {}\nkey_id = {}\n",
            self.level,
            self.s(),
            self.classes,
            self.key_id()
        );
        match &self.keying {
            Keying::Disclosed(k) => head.push_str(&format!("key = {}\n", k.to_hex())),
            Keying::Withheld { labels, .. } => {
                let list: Vec<String> = labels.iter().map(u32::to_string).collect();
                head.push_str(&format!("labels = {}\n", list.join(",")));
            }
        }
        head.push_str(&format!("digest = {}\n\n", self.digest));
        let mut out = head.into_bytes();
        for img in &self.triggers {
            out.extend_from_slice(&keying::canonical_bytes(img));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let bad = |m: String| ProtocolError::Format(m);
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("missing header terminator".into()))?;
        let head = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8".into()))?;
        let mut lines = head.lines();
        if lines.next() != Some(BUNDLE_MAGIC) {
            return Err(bad("unknown bundle version".into()));
        }
        let mut fields = std::collections::BTreeMap::new();
        for line in lines {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("bad header line {line:?}")))?;
            if fields.insert(k.to_string(), v.to_string()).is_some() {
                return Err(bad(format!("duplicate field {k}")));
            }
        }
        let get = |k: &str| fields.get(k).cloned().ok_or_else(|| bad(format!("missing field {k}")));
        let num =
            |k: &str| -> Result<u64, ProtocolError> { get(k)?.parse().map_err(|_| bad(format!("bad number in {k}"))) };
        let level: Level = get("level")?.parse()?;
        let s = num("s")? as usize;
        let classes = num("classes")? as u32;
        let key_id = get("key_id")?;
        let keying = match (fields.get("key"), fields.get("labels")) {
            (Some(hexkey), None) => {
                let k = SecretKey::from_hex(hexkey)?;
                if k.key_id() != key_id {
                    return Err(bad("key_id does not match the disclosed key".into()));
                }
                Keying::Disclosed(k)
            }
            (None, Some(list)) => {
                let labels = if list.is_empty() {
                    Vec::new()
                } else {
                    list.split(',')
                        .map(|v| v.parse::<u32>().map_err(|_| bad("bad label".into())))
                        .collect::<Result<Vec<_>, _>>()?
                };
                Keying::Withheld { labels, key_id }
            }
            _ => return Err(bad("exactly one of key and labels is required".into())),
        };
        let mut rest = &bytes[split + 2..];
        let mut triggers = Vec::with_capacity(s);
        for _ in 0..s {
            let (img, used) = read_canonical(rest)?;
            triggers.push(img);
            rest = &rest[used..];
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes after trigger block".into()));
        }
        Ok(Self {
            level,
            classes,
            triggers,
            keying,
            digest: get("digest")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ProtocolError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, ProtocolError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Seal a trigger set, refusing when its labels do not follow from `key`.
pub fn make_evidence(
    key: &SecretKey,
    triggers: &TriggerSet,
    disclose_key: bool,
) -> Result<EvidenceBundle, ProtocolError> {
    match triggers.check_labels(key) {
        Ok(()) => {}
        Err(WatermarkError::LabelMismatch) | Err(WatermarkError::Keying(_)) => {
            return Err(ProtocolError::LabelMismatch)
        }
        Err(e) => return Err(e.into()),
    }
    let a = triggers.assignment()?;
    if triggers.images.is_empty() {
        return Err(ProtocolError::Keying(KeyingError::NoTriggers));
    }
    let keying = if disclose_key {
        Keying::Disclosed(key.clone())
    } else {
        Keying::Withheld {
            labels: a.labels.clone(),
            key_id: key.key_id(),
        }
    };
    let mut b = EvidenceBundle {
        level: a.level,
        classes: a.classes,
        triggers: triggers.images.clone(),
        keying,
        digest: String::new(),
    };
    b.digest = b.compute_digest();
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Granted,
    Denied,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Granted => "GRANTED",
            Decision::Denied => "DENIED",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub level: Level,
    pub s: usize,
    pub classes: u32,
    pub m: usize,
    pub rec: f64,
    pub rarity_bits: f64,
    pub r_min: f64,
    pub decision: Decision,
    pub key_id: String,
    pub bundle_digest: String,
    /// SHA-256 of the labels scored against, as big-endian u32s.
    pub labels_digest: String,
    /// Model fingerprint or endpoint address.
    pub model: String,
    pub queries: usize,
}

impl VerificationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

fn labels_digest(labels: &[u32]) -> String {
    let mut h = Sha256::new();
    for l in labels {
        h.update(l.to_be_bytes());
    }
    hex::encode(h.finalize())
}

/// Query the oracle once per trigger and decide against `r_min`.
pub fn verify<C: Classifier + ?Sized>(
    bundle: &EvidenceBundle,
    oracle: &C,
    model_id: &str,
    r_min: f64,
) -> Result<VerificationReport, ProtocolError> {
    if !bundle.digest_ok() {
        return Err(ProtocolError::Tampered);
    }
    if let Some(c) = oracle.classes() {
        if c != bundle.classes as usize {
            return Err(ProtocolError::ClassMismatch {
                bundle: bundle.classes,
                oracle: c,
            });
        }
    }
    let labels = bundle.effective_labels()?;
    let counted = CountingOracle::new(oracle);
    let mut m = 0usize;
    for (img, &label) in bundle.triggers.iter().zip(&labels) {
        let y = counted.classify(img)?;
        if y >= bundle.classes as usize {
            return Err(OracleError::Protocol(format!("class {y} outside 0..{}", bundle.classes)).into());
        }
        m += usize::from(y == label as usize);
    }
    let s = bundle.s();
    let rarity = stats::rarity(s as u64, m as u64, bundle.classes as u64)?;
    Ok(VerificationReport {
        level: bundle.level,
        s,
        classes: bundle.classes,
        m,
        rec: 100.0 * m as f64 / s as f64,
        rarity_bits: rarity.rarity_bits,
        r_min,
        decision: if rarity.rarity_bits >= r_min {
            Decision::Granted
        } else {
            Decision::Denied
        },
        key_id: bundle.key_id(),
        bundle_digest: bundle.digest.clone(),
        labels_digest: labels_digest(&labels),
        model: model_id.to_string(),
        queries: counted.queries(),
    })
}

/// [`verify`] against a prediction service speaking the wire protocol.
pub fn verify_remote(
    bundle: &EvidenceBundle,
    endpoint: &str,
    r_min: f64,
    timeout: std::time::Duration,
) -> Result<VerificationReport, ProtocolError> {
    let oracle = RemoteOracle::new(endpoint, timeout);
    verify(bundle, &oracle, &format!("tcp://{endpoint}"), r_min)
}
