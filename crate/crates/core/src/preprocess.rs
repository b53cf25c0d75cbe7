//! Resize, edge-pad, crop, flip, grayscale-patch dropout, random erasing and normalization.

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::datamodel::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];
const PATCH_AREA: (f64, f64) = (0.02, 0.4);
const PATCH_ASPECT: (f64, f64) = (0.3, 3.3);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentStage {
    Pretrain,
    Finetune,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    /// `(height, width)` in pixels.
    pub target_size: (usize, usize),
    pub pad: usize,
    pub flip_prob: f64,
    pub color_dropout_prob: f64,
    pub erase_prob: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub stage: AugmentStage,
}

impl AugmentationPolicy {
    /// 256x128 inputs with the ImageNet channel statistics.
    pub fn full(stage: AugmentStage) -> Self {
        AugmentationPolicy {
            target_size: (256, 128),
            pad: 10,
            flip_prob: 0.5,
            color_dropout_prob: 0.4,
            erase_prob: 0.5,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            stage,
        }
    }

    /// 64x32 inputs; padding scaled down with the image.
    pub fn toy(stage: AugmentStage) -> Self {
        AugmentationPolicy {
            target_size: (64, 32),
            pad: 3,
            ..Self::full(stage)
        }
    }

    pub fn with_stage(&self, stage: AugmentStage) -> Self {
        AugmentationPolicy {
            stage,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("color_dropout_prob", self.color_dropout_prob),
            ("erase_prob", self.erase_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} = {p} is not a probability")));
            }
        }
        if self.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidConfig("std components must be positive".into()));
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(Error::InvalidConfig("target_size must be non-zero".into()));
        }
        Ok(())
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Every random decision taken by one `augment` call.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AugmentTrace {
    pub crop_offset: (usize, usize),
    pub flipped: bool,
    pub gray_patch: Option<Rect>,
    pub erased: Option<Rect>,
}

pub fn augment<R: Rng + ?Sized>(
    image: &Image,
    policy: &AugmentationPolicy,
    rng: Option<&mut R>,
) -> Result<Image> {
    augment_traced(image, policy, rng).map(|(img, _)| img)
}

/// `augment`, also reporting the decisions it sampled.
pub fn augment_traced<R: Rng + ?Sized>(
    image: &Image,
    policy: &AugmentationPolicy,
    rng: Option<&mut R>,
) -> Result<(Image, AugmentTrace)> {
    if image.channels() < 3 {
        return Err(Error::BadShape(format!(
            "augmentation needs 3 channels, image has {}",
            image.channels()
        )));
    }
    let (th, tw) = policy.target_size;
    let resized = resize_bilinear(image, th, tw);
    let mut trace = AugmentTrace::default();
    if policy.stage == AugmentStage::Eval {
        return Ok((resized, trace));
    }
    let rng = rng.ok_or_else(|| {
        Error::InvalidConfig("training-stage augmentation needs a random stream".into())
    })?;

    let mut out = if policy.pad > 0 {
        let padded = pad_edge(&resized, policy.pad);
        let oy = rng.random_range(0..=2 * policy.pad);
        let ox = rng.random_range(0..=2 * policy.pad);
        trace.crop_offset = (oy, ox);
        crop(&padded, oy, ox, th, tw)
    } else {
        resized
    };
    if rng.random_bool(policy.flip_prob) {
        trace.flipped = true;
        out = out.flip_horizontal();
    }
    if rng.random_bool(policy.color_dropout_prob) {
        if let Some(rect) = sample_rect(th, tw, rng) {
            grayscale_patch(&mut out, rect);
            trace.gray_patch = Some(rect);
        }
    }
    if policy.stage == AugmentStage::Finetune && rng.random_bool(policy.erase_prob) {
        if let Some(rect) = sample_rect(th, tw, rng) {
            random_erase(&mut out, rect, rng);
            trace.erased = Some(rect);
        }
    }
    Ok((out, trace))
}

/// Per-channel `(v - mean) / std`.
pub fn normalize(image: &Image, policy: &AugmentationPolicy) -> Image {
    map_channels(image, |c, v| ((f64::from(v) - policy.mean[c]) / policy.std[c]) as f32)
}

pub fn denormalize(image: &Image, policy: &AugmentationPolicy) -> Image {
    map_channels(image, |c, v| (f64::from(v) * policy.std[c] + policy.mean[c]) as f32)
}

/// Normalizes prepared images and stacks them into an `[N, 3, H, W]` network input.
pub fn batch_tensor(images: &[Image], policy: &AugmentationPolicy) -> Result<Tensor> {
    let (h, w) = policy.target_size;
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) || img.channels() != 3 {
            return Err(Error::BadShape(format!(
                "{}x{}x{} image in a {h}x{w}x3 batch",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        data.extend(normalize(img, policy).to_chw());
    }
    Ok(Tensor::from_vec(&[images.len(), 3, h, w], data))
}

fn map_channels(image: &Image, f: impl Fn(usize, f32) -> f32) -> Image {
    let ch = image.channels();
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if i % ch < 3 { f(i % ch, v) } else { v })
        .collect();
    Image::with_channels(image.height(), image.width(), ch, data).expect("same shape")
}

/// Bilinear resampling with half-pixel centers. Same-size resizing is an exact copy.
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f32)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut data = Vec::with_capacity(out_h * out_w * ch);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            for c in 0..ch {
                let top = image.get(y0, x0, c) * (1.0 - wx) + image.get(y0, x1, c) * wx;
                let bot = image.get(y1, x0, c) * (1.0 - wx) + image.get(y1, x1, c) * wx;
                data.push(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    Image::with_channels(out_h, out_w, ch, data).expect("resize shape")
}

/// Replicates border pixels outward by `pad` on every side.
pub fn pad_edge(image: &Image, pad: usize) -> Image {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut data = Vec::with_capacity(ph * pw * ch);
    for y in 0..ph {
        let sy = y.saturating_sub(pad).min(h - 1);
        for x in 0..pw {
            let sx = x.saturating_sub(pad).min(w - 1);
            for c in 0..ch {
                data.push(image.get(sy, sx, c));
            }
        }
    }
    Image::with_channels(ph, pw, ch, data).expect("pad shape")
}

pub fn crop(image: &Image, top: usize, left: usize, height: usize, width: usize) -> Image {
    let ch = image.channels();
    let mut data = Vec::with_capacity(height * width * ch);
    for y in top..top + height {
        for x in left..left + width {
            for c in 0..ch {
                data.push(image.get(y, x, c));
            }
        }
    }
    Image::with_channels(height, width, ch, data).expect("crop shape")
}

/// Replaces the rectangle by its own luma, so R = G = B inside it.
pub fn grayscale_patch(image: &mut Image, rect: Rect) {
    for y in rect.top..rect.top + rect.height {
        for x in rect.left..rect.left + rect.width {
            let g = (0..3).map(|c| LUMA[c] * image.get(y, x, c)).sum::<f32>();
            let g = g.clamp(0.0, 1.0);
            for c in 0..3 {
                image.set(y, x, c, g);
            }
        }
    }
}

/// Fills the rectangle with per-pixel uniform noise in `[0, 1)`.
pub fn random_erase<R: Rng + ?Sized>(image: &mut Image, rect: Rect, rng: &mut R) {
    for y in rect.top..rect.top + rect.height {
        for x in rect.left..rect.left + rect.width {
            for c in 0..3 {
                image.set(y, x, c, rng.random::<f32>());
            }
        }
    }
}

/// Area fraction uniform in [0.02, 0.4], aspect uniform in [0.3, 3.3]; up to 10 attempts.
fn sample_rect<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Option<Rect> {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.random_range(PATCH_AREA.0..=PATCH_AREA.1);
        let aspect = rng.random_range(PATCH_ASPECT.0..=PATCH_ASPECT.1);
        let rh = (target * aspect).sqrt().round() as usize;
        let rw = (target / aspect).sqrt().round() as usize;
        if rh > 0 && rw > 0 && rh < h && rw < w {
            let top = rng.random_range(0..=h - rh);
            let left = rng.random_range(0..=w - rw);
            return Some(Rect {
                top,
                left,
                height: rh,
                width: rw,
            });
        }
    }
    None
}
