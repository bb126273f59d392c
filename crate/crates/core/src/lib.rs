//! Black-box watermarking of image classifiers with keyed trigger labels.
//!
//! An owner secretly picks a few training images as triggers, relabels them
//! with classes derived from a secret key, and trains as usual. Ownership is
//! later shown by querying the suspect model on the triggers only; the match
//! count is turned into a rarity in bits, and the keyed labelling makes
//! forging a matching key after the fact measurably expensive.

pub mod attacks;
pub mod config;
pub mod image;
pub mod keying;
pub mod nn;
pub mod oracle;
pub mod protocol;
pub mod stats;
pub mod usurper;
pub mod watermark;

pub use image::Image;
pub use keying::{Level, SecretKey};
pub use nn::{ArchitectureSpec, LabeledDataset, Model};
pub use oracle::Classifier;
