//! RGB frames as planar `f64` images, PNG I/O and the training-time
//! augmentation pipeline (resize, flip, affine jitter, random crop).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar RGB image with values in `[0, 1]`, laid out `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Ok(Self::from_rgb8(&load_rgb8(path)?))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::new(h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c] as f64 / 255.0);
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [0, 1, 2].map(|c| (self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path)
            .map_err(|e| Error::data(path, format!("cannot write PNG: {e}")))
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Image::new(height, width);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
                for c in 0..3 {
                    out.set(c, y, x, self.sample_clamped(c, fy, fx));
                }
            }
        }
        out
    }

    fn sample_clamped(&self, c: usize, fy: f64, fx: f64) -> f64 {
        let y0 = (fy.floor() as usize).min(self.height - 1);
        let x0 = (fx.floor() as usize).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let dy = (fy - y0 as f64).clamp(0.0, 1.0);
        let dx = (fx - x0 as f64).clamp(0.0, 1.0);
        let top = self.get(c, y0, x0) * (1.0 - dx) + self.get(c, y0, x1) * dx;
        let bot = self.get(c, y1, x0) * (1.0 - dx) + self.get(c, y1, x1) * dx;
        top * (1.0 - dy) + bot * dy
    }

    /// Bilinear sample with zero fill outside the image.
    fn sample_zero(&self, c: usize, fy: f64, fx: f64) -> f64 {
        let y0 = fy.floor();
        let x0 = fx.floor();
        let dy = fy - y0;
        let dx = fx - x0;
        let at = |y: f64, x: f64| {
            if y < 0.0 || x < 0.0 || y >= self.height as f64 || x >= self.width as f64 {
                0.0
            } else {
                self.get(c, y as usize, x as usize)
            }
        };
        let top = at(y0, x0) * (1.0 - dx) + at(y0, x0 + 1.0) * dx;
        let bot = at(y0 + 1.0, x0) * (1.0 - dx) + at(y0 + 1.0, x0 + 1.0) * dx;
        top * (1.0 - dy) + bot * dy
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::new(self.height, self.width);
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Rotation by `degrees`, isotropic `scale` and translation `(ty, tx)` in
    /// pixels, all about the image centre.
    pub fn affine(&self, degrees: f64, scale: f64, ty: f64, tx: f64) -> Image {
        let mut out = Image::new(self.height, self.width);
        let (cy, cx) = ((self.height as f64 - 1.0) / 2.0, (self.width as f64 - 1.0) / 2.0);
        let (s, c) = degrees.to_radians().sin_cos();
        for y in 0..self.height {
            for x in 0..self.width {
                // Inverse map from output to input coordinates.
                let oy = y as f64 - cy - ty;
                let ox = x as f64 - cx - tx;
                let iy = (c * oy - s * ox) / scale + cy;
                let ix = (s * oy + c * ox) / scale + cx;
                for ch in 0..3 {
                    out.set(ch, y, x, self.sample_zero(ch, iy, ix));
                }
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        assert!(top + height <= self.height && left + width <= self.width);
        let mut out = Image::new(height, width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    out.set(c, y, x, self.get(c, top + y, left + x));
                }
            }
        }
        out
    }

    pub fn center_crop(&self, height: usize, width: usize) -> Image {
        self.crop((self.height - height) / 2, (self.width - width) / 2, height, width)
    }
}

/// Decodes an image file to 8-bit RGB.
pub fn load_rgb8(path: &Path) -> Result<image::RgbImage> {
    if !path.is_file() {
        return Err(Error::data(path, "missing frame file"));
    }
    Ok(image::open(path)
        .map_err(|e| Error::data(path, format!("cannot decode frame: {e}")))?
        .to_rgb8())
}

/// Per-channel normalisation applied after geometric preprocessing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelNorm {
    /// Plain `[0, 1]` scaling.
    pub const IDENTITY: ChannelNorm = ChannelNorm {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub const CLIP: ChannelNorm = ChannelNorm {
        mean: [0.48145466, 0.4578275, 0.40821073],
        std: [0.26862954, 0.26130258, 0.27577711],
    };
}

/// Training-time augmentation. Magnitudes default to translation up to 10%
/// of the side, scaling in `[0.9, 1.1]`, rotation within 10 degrees and a
/// horizontal flip half of the time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Side length of the resize before augmentation (256 for 224 crops).
    pub resize: usize,
    /// Final crop side length.
    pub crop: usize,
    pub flip_prob: f64,
    pub max_translate: f64,
    pub scale_range: (f64, f64),
    pub max_rotate_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::for_crop(224)
    }
}

impl AugmentConfig {
    /// The 256-then-224 protocol scaled to an arbitrary crop size.
    pub fn for_crop(crop: usize) -> Self {
        Self {
            resize: (crop * 256).div_ceil(224),
            crop,
            flip_prob: 0.5,
            max_translate: 0.1,
            scale_range: (0.9, 1.1),
            max_rotate_deg: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.resize < self.crop {
            return Err(Error::Config(format!(
                "augmentation needs resize >= crop > 0 (got {} and {})",
                self.resize, self.crop
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob)
            || self.max_translate < 0.0
            || self.scale_range.0 <= 0.0
            || self.scale_range.1 < self.scale_range.0
        {
            return Err(Error::Config("augmentation magnitudes out of range".into()));
        }
        Ok(())
    }

    pub fn apply<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Image {
        let mut x = img.resize(self.resize, self.resize);
        if rng.random::<f64>() < self.flip_prob {
            x = x.flip_horizontal();
        }
        let side = self.resize as f64;
        let ty = rng.random_range(-1.0..=1.0) * self.max_translate * side;
        let tx = rng.random_range(-1.0..=1.0) * self.max_translate * side;
        let scale = if self.scale_range.1 > self.scale_range.0 {
            rng.random_range(self.scale_range.0..=self.scale_range.1)
        } else {
            self.scale_range.0
        };
        let rot = rng.random_range(-1.0..=1.0) * self.max_rotate_deg;
        x = x.affine(rot, scale, ty, tx);
        let slack = self.resize - self.crop;
        let top = rng.random_range(0..=slack);
        let left = rng.random_range(0..=slack);
        x.crop(top, left, self.crop, self.crop)
    }
}

/// Evaluation preprocessing: a plain resize to the encoder input size.
pub fn eval_transform(img: &Image, side: usize) -> Image {
    img.resize(side, side)
}

/// Stacks images into an NCHW tensor, applying channel normalisation.
pub fn to_batch(images: &[Image], norm: ChannelNorm) -> Tensor {
    assert!(!images.is_empty());
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        assert_eq!((img.height, img.width), (h, w), "batch images must share a size");
        for c in 0..3 {
            let (m, s) = (norm.mean[c], norm.std[c]);
            data.extend(img.data[c * h * w..(c + 1) * h * w].iter().map(|v| (v - m) / s));
        }
    }
    Tensor::from_vec([images.len(), 3, h, w], data)
}
