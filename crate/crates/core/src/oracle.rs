//! Black-box prediction oracles.
//!
//! Verification and recovery measurement only ever see a [`Classifier`]:
//! one class index per image, no weights or scores.

use thiserror::Error;

use crate::image::Image;
use crate::nn::{LabeledDataset, Model, NnError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("model rejected the query: {0}")]
    Model(#[from] NnError),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

pub trait Classifier {
    /// Number of classes, when the oracle advertises it.
    fn classes(&self) -> Option<usize>;

    fn classify(&self, image: &Image) -> Result<usize, OracleError>;
}

impl Classifier for Model {
    fn classes(&self) -> Option<usize> {
        Some(Model::classes(self))
    }

    fn classify(&self, image: &Image) -> Result<usize, OracleError> {
        Ok(self.predict(image)?)
    }
}

impl<C: Classifier + ?Sized> Classifier for &C {
    fn classes(&self) -> Option<usize> {
        (**self).classes()
    }

    fn classify(&self, image: &Image) -> Result<usize, OracleError> {
        (**self).classify(image)
    }
}

/// Wraps an oracle and counts queries.
pub struct CountingOracle<C> {
    inner: C,
    queries: std::cell::Cell<usize>,
}

impl<C: Classifier> CountingOracle<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            queries: std::cell::Cell::new(0),
        }
    }

    pub fn queries(&self) -> usize {
        self.queries.get()
    }
}

impl<C: Classifier> Classifier for CountingOracle<C> {
    fn classes(&self) -> Option<usize> {
        self.inner.classes()
    }

    fn classify(&self, image: &Image) -> Result<usize, OracleError> {
        self.queries.set(self.queries.get() + 1);
        self.inner.classify(image)
    }
}

/// Percentage of samples the oracle labels correctly; `None` on an empty set.
pub fn evaluate<C: Classifier + ?Sized>(oracle: &C, data: &LabeledDataset) -> Result<Option<f64>, OracleError> {
    if data.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for (img, &label) in data.images().iter().zip(data.labels()) {
        hits += usize::from(oracle.classify(img)? == label as usize);
    }
    Ok(Some(100.0 * hits as f64 / data.len() as f64))
}
