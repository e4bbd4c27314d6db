//! Resize, pad and stack samples into model-ready tensors.

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use super::SampleRecord;
use crate::error::{ensure, Result};
use crate::geometry::{BBox, ImageSize};
use crate::mask::BinaryMask;

/// Per-channel standardization applied after scaling pixels to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Training targets of one image in canvas coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    /// 0-based class indices.
    pub labels: Vec<usize>,
    /// `CxCyWhNorm` relative to the canvas.
    pub boxes: Vec<BBox>,
    /// Canvas-sized masks.
    pub masks: Vec<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub name: String,
    pub original: ImageSize,
    /// Size after resizing, placed at the canvas origin.
    pub resized: ImageSize,
}

impl SampleMeta {
    /// Canvas-normalized `(cx, cy, w, h)` to pixel corners of the original
    /// image, clamped to it.
    pub fn to_original_xyxy(&self, b: [f64; 4], canvas: ImageSize) -> [f64; 4] {
        let sx = self.original.width as f64 / self.resized.width as f64 * canvas.width as f64;
        let sy = self.original.height as f64 / self.resized.height as f64 * canvas.height as f64;
        let (w, h) = (self.original.width as f64, self.original.height as f64);
        [
            ((b[0] - b[2] / 2.0) * sx).clamp(0.0, w),
            ((b[1] - b[3] / 2.0) * sy).clamp(0.0, h),
            ((b[0] + b[2] / 2.0) * sx).clamp(0.0, w),
            ((b[1] + b[3] / 2.0) * sy).clamp(0.0, h),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, 3, H, W)` standardized, zero in padding.
    pub images: Tensor,
    /// `(B, H, W)` u8, 1 on padding; `None` when nothing is padded.
    pub pixel_padding: Option<Tensor>,
    pub targets: Vec<Target>,
    pub meta: Vec<SampleMeta>,
    pub canvas: ImageSize,
}

fn resize_mask(m: &BinaryMask, w: usize, h: usize) -> BinaryMask {
    if (m.width(), m.height()) == (w, h) {
        return m.clone();
    }
    let (sx, sy) = (m.width() as f64 / w as f64, m.height() as f64 / h as f64);
    BinaryMask::from_fn(w, h, |x, y| {
        let u = (((x as f64 + 0.5) * sx) as usize).min(m.width() - 1);
        let v = (((y as f64 + 0.5) * sy) as usize).min(m.height() - 1);
        m.get(u, v)
    })
}

fn place(m: &BinaryMask, w: usize, h: usize) -> BinaryMask {
    BinaryMask::from_fn(w, h, |x, y| x < m.width() && y < m.height() && m.get(x, y))
}

/// Resizes every sample so its long side equals `target`, pads to a common
/// canvas whose sides are multiples of `multiple`, and stacks them.
pub fn collate(
    samples: &[&SampleRecord],
    target: u32,
    multiple: usize,
    norm: &Normalization,
    device: &Device,
) -> Result<Batch> {
    ensure!(!samples.is_empty(), "cannot collate an empty batch");
    ensure!(target > 0 && multiple > 0, "target size and multiple must be positive");
    let mut resized = Vec::with_capacity(samples.len());
    for s in samples {
        let (w, h) = s.image.dimensions();
        let scale = target as f64 / w.max(h) as f64;
        let nw = ((w as f64 * scale).round() as u32).max(1);
        let nh = ((h as f64 * scale).round() as u32).max(1);
        let img = if (nw, nh) == (w, h) {
            s.image.clone()
        } else {
            image::imageops::resize(&s.image, nw, nh, FilterType::Triangle)
        };
        resized.push((img, nw, nh));
    }
    let round_up = |v: u32| (v as usize).div_ceil(multiple) * multiple;
    let cw = resized.iter().map(|r| round_up(r.1)).max().unwrap_or(multiple);
    let ch = resized.iter().map(|r| round_up(r.2)).max().unwrap_or(multiple);
    let canvas = ImageSize::new(cw as u32, ch as u32);

    let b = samples.len();
    let plane = cw * ch;
    let mut pix = vec![0f32; b * 3 * plane];
    let mut pad = vec![1u8; b * plane];
    let mut targets = Vec::with_capacity(b);
    let mut meta = Vec::with_capacity(b);
    for (i, (s, (img, nw, nh))) in samples.iter().zip(&resized).enumerate() {
        for (x, y, p) in img.enumerate_pixels() {
            let o = y as usize * cw + x as usize;
            pad[i * plane + o] = 0;
            for c in 0..3 {
                pix[(i * 3 + c) * plane + o] = (p.0[c] as f32 / 255.0 - norm.mean[c]) / norm.std[c];
            }
        }
        let (w, h) = s.image.dimensions();
        let (sx, sy) = (*nw as f64 / w as f64, *nh as f64 / h as f64);
        let mut t = Target {
            labels: vec![],
            boxes: vec![],
            masks: vec![],
        };
        for (inst, bx) in s.instances.iter().zip(&s.boxes) {
            let m = resize_mask(&inst.mask, *nw as usize, *nh as usize);
            if m.is_empty() {
                log::debug!("{}: instance vanished after resize", s.name);
                continue;
            }
            let c = bx.coords();
            let x0 = c[0] * sx / cw as f64;
            let y0 = c[1] * sy / ch as f64;
            let x1 = c[2] * sx / cw as f64;
            let y1 = c[3] * sy / ch as f64;
            t.labels.push(inst.class_id as usize - 1);
            t.boxes.push(BBox::cxcywh(
                ((x0 + x1) / 2.0).clamp(0.0, 1.0),
                ((y0 + y1) / 2.0).clamp(0.0, 1.0),
                (x1 - x0).clamp(0.0, 1.0),
                (y1 - y0).clamp(0.0, 1.0),
            )?);
            t.masks.push(place(&m, cw, ch));
        }
        targets.push(t);
        meta.push(SampleMeta {
            name: s.name.clone(),
            original: s.size(),
            resized: ImageSize::new(*nw, *nh),
        });
    }
    let images = Tensor::from_vec(pix, (b, 3, ch, cw), device)?;
    let pixel_padding = if pad.iter().any(|&p| p != 0) {
        Some(Tensor::from_vec(pad, (b, ch, cw), device)?)
    } else {
        None
    };
    Ok(Batch {
        images,
        pixel_padding,
        targets,
        meta,
        canvas,
    })
}
