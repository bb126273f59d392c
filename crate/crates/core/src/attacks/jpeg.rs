//! Lossy baseline-JPEG round trip without entropy coding.
//!
//! Each channel goes through level shift, 8x8 DCT-II, quantisation with the
//! standard tables scaled by the quality factor, and the inverse path. RGB
//! images are converted to YCbCr first; chroma is not subsampled.

use std::sync::OnceLock;

use crate::image::Image;
use crate::oracle::{Classifier, OracleError};

use super::AttackError;

#[rustfmt::skip]
const LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[rustfmt::skip]
const CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Base table scaled by the usual quality mapping, entries in `[1, 255]`.
pub fn scaled_table(base: &[u16; 64], quality: u8) -> [u16; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    out
}

pub fn luma_table(quality: u8) -> [u16; 64] {
    scaled_table(&LUMA, quality)
}

pub fn chroma_table(quality: u8) -> [u16; 64] {
    scaled_table(&CHROMA, quality)
}

/// `cos((2x + 1) u pi / 16)` scaled by the orthonormal factor of `u`.
fn basis() -> &'static [[f64; 8]; 8] {
    static B: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    B.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let a = if u == 0 {
                (1.0f64 / 8.0).sqrt()
            } else {
                (2.0f64 / 8.0).sqrt()
            };
            for (x, v) in row.iter_mut().enumerate() {
                *v = a * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        b
    })
}

fn dct(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

fn idct(coef: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| b[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

/// Round trip one plane of samples in `[0, 255]`, edges replicated to whole blocks.
fn process_plane(plane: &[f64], h: usize, w: usize, table: &[u16; 64]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block = [0.0; 64];
            for y in 0..8 {
                for x in 0..8 {
                    let sy = (by + y).min(h - 1);
                    let sx = (bx + x).min(w - 1);
                    block[y * 8 + x] = plane[sy * w + sx] - 128.0;
                }
            }
            let mut coef = dct(&block);
            for (c, &q) in coef.iter_mut().zip(table) {
                *c = (*c / q as f64).round() * q as f64;
            }
            let rec = idct(&coef);
            for y in 0..8.min(h - by) {
                for x in 0..8.min(w - bx) {
                    out[(by + y) * w + bx + x] = rec[y * 8 + x] + 128.0;
                }
            }
        }
    }
    out
}

fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Compress and decompress `image` at quality `quality` (1 to 100).
pub fn jpeg_preprocess(image: &Image, quality: u8) -> Result<Image, AttackError> {
    if !(1..=100).contains(&quality) {
        return Err(AttackError::BadQuality(quality));
    }
    let (h, w, c) = (
        image.height() as usize,
        image.width() as usize,
        image.channels() as usize,
    );
    let px = image.pixels();
    let plane = |ch: usize| -> Vec<f64> { (0..h * w).map(|i| px[i * c + ch] as f64).collect() };
    let mut out = vec![0u8; px.len()];
    if c == 3 {
        let (r, g, b) = (plane(0), plane(1), plane(2));
        let mut y = vec![0.0; h * w];
        let mut cb = vec![0.0; h * w];
        let mut cr = vec![0.0; h * w];
        for i in 0..h * w {
            y[i] = (0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).round().clamp(0.0, 255.0);
            cb[i] = (128.0 - 0.168736 * r[i] - 0.331264 * g[i] + 0.5 * b[i])
                .round()
                .clamp(0.0, 255.0);
            cr[i] = (128.0 + 0.5 * r[i] - 0.418688 * g[i] - 0.081312 * b[i])
                .round()
                .clamp(0.0, 255.0);
        }
        let y = process_plane(&y, h, w, &luma_table(quality));
        let cb = process_plane(&cb, h, w, &chroma_table(quality));
        let cr = process_plane(&cr, h, w, &chroma_table(quality));
        for i in 0..h * w {
            let (yy, u, v) = (y[i], cb[i] - 128.0, cr[i] - 128.0);
            out[i * 3] = to_byte(yy + 1.402 * v);
            out[i * 3 + 1] = to_byte(yy - 0.344136 * u - 0.714136 * v);
            out[i * 3 + 2] = to_byte(yy + 1.772 * u);
        }
    } else {
        let table = luma_table(quality);
        for ch in 0..c {
            let rec = process_plane(&plane(ch), h, w, &table);
            for i in 0..h * w {
                out[i * c + ch] = to_byte(rec[i]);
            }
        }
    }
    Ok(Image::new(image.height(), image.width(), image.channels(), out)?)
}

/// Any oracle queried through a JPEG round trip of its inputs.
pub struct JpegOracle<C> {
    pub inner: C,
    pub quality: u8,
}

impl<C: Classifier> Classifier for JpegOracle<C> {
    fn classes(&self) -> Option<usize> {
        self.inner.classes()
    }

    fn classify(&self, image: &Image) -> Result<usize, OracleError> {
        let x = jpeg_preprocess(image, self.quality).map_err(|e| OracleError::Protocol(e.to_string()))?;
        self.inner.classify(&x)
    }
}
