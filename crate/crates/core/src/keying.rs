//! Secret keys and the three trigger-labelling rules.
//!
//! All three levels share one primitive, HMAC-SHA256 under the owner's key:
//!
//! * level 0: `label_i = H(i) mod c`, a keyed counter stream;
//! * level 1: `label_i = H(bytes(x_i)) mod c`, one hash per trigger;
//! * level 2: `h = H(bytes(x_1) || ... || bytes(x_s))`, then
//!   `label_i = H(h || i) mod c`, so touching any trigger reshuffles every label.
//!
//! Digests are read as 256-bit big-endian integers before the modulo.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use hmac::{Hmac, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::{Image, ImageError};

type HmacSha256 = Hmac<Sha256>;

pub const KEY_LEN: usize = 32;
pub const DIGEST_LEN: usize = 32;

/// Leading tag of every canonical image encoding.
pub const IMAGE_TAG: &[u8; 4] = b"TMI1";

const KEYGEN_DOMAIN: &[u8] = b"trigmark/keygen/v1";

#[derive(Debug, Error)]
pub enum KeyingError {
    #[error("class count must be at least 2, got {0}")]
    TooFewClasses(u32),
    #[error("at least one trigger is required")]
    NoTriggers,
    #[error("triggers {first} and {second} are identical")]
    DuplicateTrigger { first: usize, second: usize },
    #[error("key file must hold exactly 64 hex characters")]
    BadKeyEncoding,
    #[error("unknown watermark level {0}")]
    BadLevel(u8),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o error on key file: {0}")]
    Io(#[from] std::io::Error),
}

/// Label-generation rule, in increasing order of forgery cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Level {
    Zero,
    One,
    Two,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Zero, Level::One, Level::Two];

    pub fn as_u8(self) -> u8 {
        match self {
            Level::Zero => 0,
            Level::One => 1,
            Level::Two => 2,
        }
    }
}

impl TryFrom<u8> for Level {
    type Error = KeyingError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Level::Zero),
            1 => Ok(Level::One),
            2 => Ok(Level::Two),
            other => Err(KeyingError::BadLevel(other)),
        }
    }
}

impl From<Level> for u8 {
    fn from(l: Level) -> u8 {
        l.as_u8()
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

impl FromStr for Level {
    type Err = KeyingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: u8 = s.trim().parse().map_err(|_| KeyingError::BadLevel(u8::MAX))?;
        Level::try_from(v)
    }
}

/// The owner's 256-bit secret.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey {
    bytes: [u8; KEY_LEN],
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecretKey").field("key_id", &self.key_id()).finish()
    }
}

impl SecretKey {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self { bytes }
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.bytes
    }

    /// First 8 hex characters of SHA-256 over the key bytes.
    pub fn key_id(&self) -> String {
        let digest = Sha256::digest(self.bytes);
        hex::encode(&digest[..4])
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, KeyingError> {
        let s = s.trim();
        if s.len() != 2 * KEY_LEN {
            return Err(KeyingError::BadKeyEncoding);
        }
        let mut bytes = [0u8; KEY_LEN];
        hex::decode_to_slice(s, &mut bytes).map_err(|_| KeyingError::BadKeyEncoding)?;
        Ok(Self { bytes })
    }

    /// Key file contents: 64 lowercase hex characters and a newline.
    pub fn to_key_file(&self) -> String {
        format!("{}\n", self.to_hex())
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<(), KeyingError> {
        std::fs::write(path, self.to_key_file())?;
        Ok(())
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self, KeyingError> {
        let text = std::fs::read_to_string(path)?;
        let line = text.strip_suffix('\n').unwrap_or(&text);
        Self::from_hex(line)
    }
}

/// A fresh key from the OS entropy source, or a reproducible one from `seed`.
pub fn generate_key(seed: Option<u64>) -> SecretKey {
    let mut bytes = [0u8; KEY_LEN];
    match seed {
        Some(seed) => {
            let mut mac = HmacSha256::new_from_slice(KEYGEN_DOMAIN).expect("hmac accepts any key");
            mac.update(&seed.to_be_bytes());
            bytes.copy_from_slice(&mac.finalize().into_bytes());
        }
        None => rand::rngs::OsRng.fill_bytes(&mut bytes),
    }
    SecretKey { bytes }
}

/// `tag || height || width || channels || pixels`, dimensions as big-endian u32.
pub fn canonical_bytes(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(canonical_len(image));
    out.extend_from_slice(IMAGE_TAG);
    out.extend_from_slice(&image.height().to_be_bytes());
    out.extend_from_slice(&image.width().to_be_bytes());
    out.extend_from_slice(&image.channels().to_be_bytes());
    out.extend_from_slice(image.pixels());
    out
}

pub fn canonical_len(image: &Image) -> usize {
    IMAGE_TAG.len() + 12 + image.len()
}

/// Inverse of [`canonical_bytes`]; the input must contain exactly one image.
pub fn image_from_canonical(bytes: &[u8]) -> Result<Image, ImageError> {
    if bytes.len() < IMAGE_TAG.len() + 12 {
        return Err(ImageError::Malformed("truncated header"));
    }
    if &bytes[..4] != IMAGE_TAG {
        return Err(ImageError::Malformed("bad tag"));
    }
    let dim = |i: usize| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    Image::new(dim(0), dim(1), dim(2), bytes[16..].to_vec())
}

/// HMAC-SHA256 of `data` under `key`.
pub fn keyed_hash(data: &[u8], key: &SecretKey) -> [u8; DIGEST_LEN] {
    let mut mac = HmacSha256::new_from_slice(&key.bytes).expect("hmac accepts any key");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

/// Digest read as a big-endian integer, reduced modulo `classes`.
pub fn digest_mod(digest: &[u8; DIGEST_LEN], classes: u32) -> u32 {
    let c = classes as u64;
    digest.iter().fold(0u64, |r, &b| (r * 256 + b as u64) % c) as u32
}

/// How a label vector is tied to the key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binding {
    /// Level 0: `H(index as u32 big-endian)`.
    CounterStream,
    /// Level 1: one hash per trigger.
    PerImage,
    /// Level 2: hex of the joint digest used as the label seed.
    Joint { digest: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub level: Level,
    pub classes: u32,
    pub labels: Vec<u32>,
    pub binding: Binding,
}

fn check_classes(c: u32) -> Result<(), KeyingError> {
    if c < 2 {
        Err(KeyingError::TooFewClasses(c))
    } else {
        Ok(())
    }
}

fn check_triggers(triggers: &[Image]) -> Result<(), KeyingError> {
    if triggers.is_empty() {
        return Err(KeyingError::NoTriggers);
    }
    let mut seen = std::collections::HashMap::with_capacity(triggers.len());
    for (i, img) in triggers.iter().enumerate() {
        if let Some(&first) = seen.get(img) {
            return Err(KeyingError::DuplicateTrigger { first, second: i });
        }
        seen.insert(img, i);
    }
    Ok(())
}

fn counter_label(key: &SecretKey, prefix: &[u8], index: u32, classes: u32) -> u32 {
    let mut data = Vec::with_capacity(prefix.len() + 4);
    data.extend_from_slice(prefix);
    data.extend_from_slice(&index.to_be_bytes());
    digest_mod(&keyed_hash(&data, key), classes)
}

pub fn labels_level0(key: &SecretKey, s: usize, classes: u32) -> Result<LabelAssignment, KeyingError> {
    check_classes(classes)?;
    if s == 0 {
        return Err(KeyingError::NoTriggers);
    }
    let labels = (0..s as u32).map(|i| counter_label(key, &[], i, classes)).collect();
    Ok(LabelAssignment {
        level: Level::Zero,
        classes,
        labels,
        binding: Binding::CounterStream,
    })
}

pub fn label_level1(image: &Image, key: &SecretKey, classes: u32) -> u32 {
    digest_mod(&keyed_hash(&canonical_bytes(image), key), classes)
}

pub fn labels_level1(triggers: &[Image], key: &SecretKey, classes: u32) -> Result<LabelAssignment, KeyingError> {
    check_classes(classes)?;
    check_triggers(triggers)?;
    let labels = triggers.iter().map(|x| label_level1(x, key, classes)).collect();
    Ok(LabelAssignment {
        level: Level::One,
        classes,
        labels,
        binding: Binding::PerImage,
    })
}

/// Joint digest over the ordered trigger list.
pub fn joint_digest(triggers: &[Image], key: &SecretKey) -> [u8; DIGEST_LEN] {
    let mut mac = HmacSha256::new_from_slice(&key.bytes).expect("hmac accepts any key");
    for img in triggers {
        mac.update(&canonical_bytes(img));
    }
    mac.finalize().into_bytes().into()
}

/// Level-2 labels derived from an already computed joint digest.
pub fn labels_from_joint(joint: &[u8; DIGEST_LEN], key: &SecretKey, s: usize, classes: u32) -> Vec<u32> {
    (0..s as u32).map(|i| counter_label(key, joint, i, classes)).collect()
}

pub fn labels_level2(triggers: &[Image], key: &SecretKey, classes: u32) -> Result<LabelAssignment, KeyingError> {
    check_classes(classes)?;
    check_triggers(triggers)?;
    let joint = joint_digest(triggers, key);
    Ok(LabelAssignment {
        level: Level::Two,
        classes,
        labels: labels_from_joint(&joint, key, triggers.len(), classes),
        binding: Binding::Joint {
            digest: hex::encode(joint),
        },
    })
}

/// Dispatch on level. Level 0 only uses the trigger count.
pub fn labels_for_level(
    level: Level,
    triggers: &[Image],
    key: &SecretKey,
    classes: u32,
) -> Result<LabelAssignment, KeyingError> {
    match level {
        Level::Zero => labels_level0(key, triggers.len(), classes),
        Level::One => labels_level1(triggers, key, classes),
        Level::Two => labels_level2(triggers, key, classes),
    }
}

/// Distinct-image check usable by callers that build trigger lists themselves.
pub fn all_distinct(images: &[Image]) -> bool {
    let set: HashSet<&Image> = images.iter().collect();
    set.len() == images.len()
}
