use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::LabeledImage;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Side of the square the image is first resized to.
    pub resize: usize,
    /// Side of the square crop fed to the network.
    pub crop: usize,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            resize: 40,
            crop: 32,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::config(
                "crop",
                format!("crop {} must be in 1..={}", self.crop, self.resize),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    /// Resize, random crop, random horizontal flip.
    Train,
    /// Resize and center crop only.
    Eval,
}

/// Bilinear resize of an `[H,W,C]` image using pixel-center alignment.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[h, w, c] = img.shape() else {
        return Err(Error::config(
            "image",
            format!("expected [H,W,C], got {:?}", img.shape()),
        ));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("resize", "target size must be positive"));
    }
    let src = img.data();
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let pos = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, w);
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Tensor::new([out_h, out_w, c], out)?)
}

pub fn crop(img: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let &[h, w, c] = img.shape() else {
        return Err(Error::config(
            "image",
            format!("expected [H,W,C], got {:?}", img.shape()),
        ));
    };
    if size == 0 || top + size > h || left + size > w {
        return Err(Error::config(
            "crop",
            format!("{size}x{size} at ({top},{left}) outside {h}x{w}"),
        ));
    }
    let src = img.data();
    let mut out = Vec::with_capacity(size * size * c);
    for y in top..top + size {
        out.extend_from_slice(&src[(y * w + left) * c..(y * w + left + size) * c]);
    }
    Ok(Tensor::new([size, size, c], out)?)
}

pub fn hflip(img: &Tensor) -> Tensor {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&src[(y * w + x) * c..(y * w + x + 1) * c]);
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

pub fn augment(
    img: &LabeledImage,
    cfg: &AugmentConfig,
    mode: AugmentMode,
    rng: &mut Rng,
) -> Result<LabeledImage> {
    cfg.validate()?;
    let resized = resize_bilinear(&img.pixels, cfg.resize, cfg.resize)?;
    let slack = cfg.resize - cfg.crop;
    let pixels = match mode {
        AugmentMode::Eval => crop(&resized, slack / 2, slack / 2, cfg.crop)?,
        AugmentMode::Train => {
            let top = rng.random_range(0..=slack);
            let left = rng.random_range(0..=slack);
            let cropped = crop(&resized, top, left, cfg.crop)?;
            if rng.random_bool(cfg.flip_prob) {
                hflip(&cropped)
            } else {
                cropped
            }
        }
    };
    Ok(LabeledImage {
        pixels,
        class_id: img.class_id,
    })
}
