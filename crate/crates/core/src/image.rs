use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("pixel buffer holds {got} bytes, shape {height}x{width}x{channels} needs {expected}")]
    LengthMismatch {
        height: u32,
        width: u32,
        channels: u32,
        expected: usize,
        got: usize,
    },
    #[error("image dimensions must be non-zero")]
    EmptyShape,
    #[error("only 8-bit pixel storage is supported, got {0} bits per sample")]
    NotEightBit(u32),
    #[error("malformed canonical image encoding: {0}")]
    Malformed(&'static str),
}

/// An 8-bit image stored row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Image {
    height: u32,
    width: u32,
    channels: u32,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: u32, width: u32, channels: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(ImageError::EmptyShape);
        }
        let expected = height as usize * width as usize * channels as usize;
        if pixels.len() != expected {
            return Err(ImageError::LengthMismatch {
                height,
                width,
                channels,
                expected,
                got: pixels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Builds an image from samples stored at `bits_per_sample` depth.
    /// Anything other than 8 bits is rejected rather than rescaled.
    pub fn from_samples(
        height: u32,
        width: u32,
        channels: u32,
        bits_per_sample: u32,
        samples: &[u8],
    ) -> Result<Self, ImageError> {
        if bits_per_sample != 8 {
            return Err(ImageError::NotEightBit(bits_per_sample));
        }
        Self::new(height, width, channels, samples.to_vec())
    }

    pub fn filled(height: u32, width: u32, channels: u32, value: u8) -> Self {
        let len = height as usize * width as usize * channels as usize;
        Self::new(height, width, channels, vec![value; len]).expect("non-empty shape")
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn shape(&self) -> (u32, u32, u32) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Toggle the least significant bit of one sample.
    pub fn flip_lsb(&mut self, index: usize) {
        self.pixels[index] ^= 1;
    }

    /// Pixels scaled to `[0, 1]`, in channel-major (CHW) order for the engine.
    pub fn to_chw_unit(&self) -> Vec<f32> {
        let (h, w, c) = (self.height as usize, self.width as usize, self.channels as usize);
        let mut out = vec![0.0f32; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[ch * h * w + y * w + x] = self.pixels[(y * w + x) * c + ch] as f32 / 255.0;
                }
            }
        }
        out
    }

    /// L-infinity distance between two images of the same shape.
    pub fn linf_distance(&self, other: &Image) -> Option<u8> {
        if self.shape() != other.shape() {
            return None;
        }
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| a.abs_diff(*b)).max()
    }
}
