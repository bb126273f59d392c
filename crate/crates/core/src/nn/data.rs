use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NnError;
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Finetune,
}

/// Images with class labels and a per-sample split tag.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<u32>,
    splits: Vec<Split>,
    classes: u32,
}

impl LabeledDataset {
    /// Every sample starts in the training split.
    pub fn new(images: Vec<Image>, labels: Vec<u32>, classes: u32) -> Result<Self, NnError> {
        if images.len() != labels.len() {
            return Err(NnError::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::Data(format!("label {bad} out of range for {classes} classes")));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(NnError::Data("images have mixed shapes".into()));
            }
        }
        let splits = vec![Split::Train; images.len()];
        Ok(Self {
            images,
            labels,
            splits,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> u32 {
        self.classes
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    /// Assign a seeded 80/10/10 train/validation/fine-tune split.
    pub fn with_split(mut self, seed: u64) -> Self {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        for (rank, &i) in order.iter().enumerate() {
            self.splits[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Finetune
            };
        }
        self
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Copy of the samples in `split`, all tagged as training samples.
    pub fn subset(&self, split: Split) -> Self {
        self.select(&self.indices(split))
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            splits: vec![Split::Train; indices.len()],
            classes: self.classes,
        }
    }

    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            splits: self.splits[..n].to_vec(),
            classes: self.classes,
        }
    }

    /// Same samples and splits with labels replaced.
    pub fn with_labels(&self, labels: Vec<u32>) -> Result<Self, NnError> {
        if labels.len() != self.len() {
            return Err(NnError::Data("label vector length differs from dataset".into()));
        }
        if labels.iter().any(|&l| l >= self.classes) {
            return Err(NnError::Data("label out of range".into()));
        }
        Ok(Self { labels, ..self.clone() })
    }

    /// Keep only samples whose label is below `classes`, relabelled into a
    /// `classes`-way problem.
    pub fn restrict_classes(&self, classes: u32) -> Result<Self, NnError> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] < classes).collect();
        let mut out = self.select(&keep);
        out.classes = classes;
        for (k, &i) in keep.iter().enumerate() {
            out.splits[k] = self.splits[i];
        }
        Ok(out)
    }
}

fn read_u32_be(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parse an IDX image file (magic 0x00000803) and its label file (0x00000801).
pub fn parse_idx(images: &[u8], labels: &[u8], limit: Option<usize>) -> Result<LabeledDataset, NnError> {
    if images.len() < 16 || labels.len() < 8 {
        return Err(NnError::Data("IDX file too short".into()));
    }
    let img_magic = read_u32_be(images, 0);
    if img_magic >> 8 != 0x08 {
        // type byte 0x08 is unsigned 8-bit
        let type_code = (img_magic >> 8) & 0xFF;
        let bits = match type_code {
            0x0B => 16,
            0x0C | 0x0D => 32,
            0x0E => 64,
            _ => return Err(NnError::Data(format!("bad IDX image magic {img_magic:#010x}"))),
        };
        return Err(NnError::Image(crate::image::ImageError::NotEightBit(bits)));
    }
    if img_magic & 0xFF != 3 {
        return Err(NnError::Data(format!(
            "IDX image file must be 3-D, magic {img_magic:#010x}"
        )));
    }
    if read_u32_be(labels, 0) != 0x0801 {
        return Err(NnError::Data("bad IDX label magic".into()));
    }
    let n = read_u32_be(images, 4) as usize;
    let h = read_u32_be(images, 8);
    let w = read_u32_be(images, 12);
    if read_u32_be(labels, 4) as usize != n {
        return Err(NnError::Data("IDX image and label counts differ".into()));
    }
    let px = (h * w) as usize;
    if images.len() != 16 + n * px || labels.len() != 8 + n {
        return Err(NnError::Data("IDX payload length does not match header".into()));
    }
    let n = limit.map_or(n, |l| l.min(n));
    let imgs = (0..n)
        .map(|i| Image::new(h, w, 1, images[16 + i * px..16 + (i + 1) * px].to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    let labs: Vec<u32> = labels[8..8 + n].iter().map(|&b| b as u32).collect();
    let classes = labs.iter().max().map_or(2, |&m| (m + 1).max(10));
    LabeledDataset::new(imgs, labs, classes)
}

pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<LabeledDataset, NnError> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| NnError::Io(format!("{}: {e}", p.display())));
    parse_idx(&read(images)?, &read(labels)?, limit)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parse CIFAR-10 binary batches: one label byte then R, G, B planes of 32x32.
pub fn parse_cifar(bytes: &[u8], limit: Option<usize>) -> Result<LabeledDataset, NnError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(NnError::Data(
            "CIFAR binary length is not a whole number of records".into(),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let n = limit.map_or(n, |l| l.min(n));
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD).take(n) {
        labels.push(rec[0] as u32);
        let planes = &rec[1..];
        let mut px = vec![0u8; 3 * 1024];
        for i in 0..1024 {
            for ch in 0..3 {
                px[i * 3 + ch] = planes[ch * 1024 + i];
            }
        }
        images.push(Image::new(32, 32, 3, px)?);
    }
    LabeledDataset::new(images, labels, 10)
}

pub fn load_cifar(paths: &[&Path], limit: Option<usize>) -> Result<LabeledDataset, NnError> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(std::fs::read(p).map_err(|e| NnError::Io(format!("{}: {e}", p.display())))?);
    }
    parse_cifar(&all, limit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> LabeledDataset {
        let imgs = (0..n).map(|i| Image::filled(2, 2, 1, i as u8)).collect();
        let labels = (0..n).map(|i| (i % 3) as u32).collect();
        LabeledDataset::new(imgs, labels, 3).unwrap()
    }

    #[test]
    fn split_fractions() {
        let d = toy(101).with_split(4);
        let tr = d.indices(Split::Train).len();
        let va = d.indices(Split::Val).len();
        let ft = d.indices(Split::Finetune).len();
        assert_eq!(tr + va + ft, 101);
        assert!((tr as f64 - 80.8).abs() <= 1.0);
        assert!((va as f64 - 10.1).abs() <= 1.0);
        assert!((ft as f64 - 10.1).abs() <= 1.0);
        assert_eq!(d, toy(101).with_split(4));
    }

    #[test]
    fn idx_round_trip() {
        let mut imgs = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        imgs.extend_from_slice(&[1, 2, 3, 4, 5, 6, 7, 8]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        let d = parse_idx(&imgs, &labels, None).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.image(1).pixels(), &[5, 6, 7, 8]);
        assert_eq!(d.labels(), &[7, 3]);
        assert_eq!(parse_idx(&imgs, &labels, Some(1)).unwrap().len(), 1);
    }

    #[test]
    fn idx_rejects_non_byte_pixels() {
        let mut imgs = vec![0, 0, 0x0B, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1];
        imgs.extend_from_slice(&[0, 0]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 1, 0];
        assert!(matches!(
            parse_idx(&imgs, &labels, None),
            Err(NnError::Image(crate::image::ImageError::NotEightBit(16)))
        ));
    }

    #[test]
    fn cifar_planes_interleave() {
        let mut rec = vec![4u8];
        rec.extend(std::iter::repeat_n(10, 1024));
        rec.extend(std::iter::repeat_n(20, 1024));
        rec.extend(std::iter::repeat_n(30, 1024));
        let d = parse_cifar(&rec, None).unwrap();
        assert_eq!(d.label(0), 4);
        assert_eq!(&d.image(0).pixels()[..6], &[10, 20, 30, 10, 20, 30]);
        assert!(parse_cifar(&rec[1..], None).is_err());
    }

    #[test]
    fn rejects_bad_labels() {
        let imgs = vec![Image::filled(1, 1, 1, 0)];
        assert!(LabeledDataset::new(imgs, vec![5], 3).is_err());
    }
}
