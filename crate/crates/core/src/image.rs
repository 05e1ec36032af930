//! 8-bit pixel grids with an explicit channel count.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{bail, Result};

/// Row-major, channel-interleaved 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0; height * width * channels],
        }
    }

    pub fn from_pixels(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels == 0 || pixels.len() != height * width * channels {
            bail!(
                Shape,
                "{} pixels for a {height}x{width}x{channels} image",
                pixels.len()
            );
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Bilinear resize to `h x w`.
    pub fn resize(&self, h: usize, w: usize) -> Image {
        if h == self.height && w == self.width {
            return self.clone();
        }
        let mut out = Image::new(h, w, self.channels);
        let sy = self.height as f64 / h as f64;
        let sx = self.width as f64 / w as f64;
        for y in 0..h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (fy as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (fx as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..self.channels {
                    let a = self.get(y0, x0, c) as f64 * (1.0 - tx) + self.get(y0, x1, c) as f64 * tx;
                    let b = self.get(y1, x0, c) as f64 * (1.0 - tx) + self.get(y1, x1, c) as f64 * tx;
                    let v = a * (1.0 - ty) + b * ty;
                    out.set(y, x, c, libm::round(v).clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width {
            bail!(
                Shape,
                "crop {h}x{w} at ({top},{left}) outside {}x{}",
                self.height,
                self.width
            );
        }
        let mut out = Image::new(h, w, self.channels);
        let rowlen = w * self.channels;
        for y in 0..h {
            let src = ((top + y) * self.width + left) * self.channels;
            out.pixels[y * rowlen..(y + 1) * rowlen].copy_from_slice(&self.pixels[src..src + rowlen]);
        }
        Ok(out)
    }

    /// Resize up by `margin` pixels then take a seeded random crop back to
    /// the original size. `margin == 0` returns the image unchanged.
    pub fn resize_and_random_crop<R: Rng + ?Sized>(&self, margin: usize, rng: &mut R) -> Image {
        if margin == 0 {
            return self.clone();
        }
        let big = self.resize(self.height + margin, self.width + margin);
        let top = rng.gen_range(0..=margin);
        let left = rng.gen_range(0..=margin);
        big.crop(top, left, self.height, self.width)
            .expect("crop inside resized image")
    }
}
