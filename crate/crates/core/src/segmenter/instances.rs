//! Turning per-query detections and mask probabilities into instances.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::{BBox, ImageSize};
use crate::mask::{BinaryMask, Rle};

/// One decoder query after softmax. `class_probs` has `C + 1` entries, the
/// last being no-object.
#[derive(Debug, Clone)]
pub struct QueryPrediction {
    pub class_probs: Vec<f64>,
    pub bbox: BBox,
}

impl QueryPrediction {
    /// Best object class (0-based logit index) and its probability.
    pub fn best_class(&self) -> Option<(usize, f64)> {
        let n = self.class_probs.len().checked_sub(1)?;
        self.class_probs[..n]
            .iter()
            .copied()
            .enumerate()
            .fold(None, |best, (i, p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((i, p)),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub query: usize,
    /// Catalog id, 1-based.
    pub class_id: u32,
    pub confidence: f64,
    /// Absolute pixel corners.
    pub bbox: BBox,
    pub mask: BinaryMask,
}

/// Keeps queries whose best object probability exceeds `threshold`, binarizes
/// their mask probabilities at 0.5 and gives contested pixels to the more
/// confident instance. `mask_probs[q]` is a row-major `width * height` map or
/// `None` when no mask was decoded for that query.
pub fn assemble_instances(
    queries: &[QueryPrediction],
    mask_probs: &[Option<Vec<f32>>],
    size: ImageSize,
    threshold: f64,
) -> Result<Vec<Instance>> {
    ensure!(
        queries.len() == mask_probs.len(),
        "{} queries but {} mask slots",
        queries.len(),
        mask_probs.len()
    );
    ensure!(size.width > 0 && size.height > 0, "image size must be positive");
    let (w, h) = (size.width as usize, size.height as usize);

    let mut kept = Vec::new();
    for (q, pred) in queries.iter().enumerate() {
        let Some((cls, conf)) = pred.best_class() else { continue };
        if conf > threshold {
            kept.push((q, cls, conf));
        }
    }
    // stable: equal confidences keep query order
    kept.sort_by(|a, b| b.2.total_cmp(&a.2));

    let mut owner = vec![false; w * h];
    let mut out = Vec::with_capacity(kept.len());
    for (q, cls, conf) in kept {
        let mut mask = BinaryMask::new(w, h);
        if let Some(p) = &mask_probs[q] {
            ensure!(p.len() == w * h, "mask {q} has {} pixels, expected {}", p.len(), w * h);
            for (i, &v) in p.iter().enumerate() {
                if v >= 0.5 && !owner[i] {
                    owner[i] = true;
                    mask.set(i % w, i / w, true);
                }
            }
        }
        let c = queries[q].bbox.to_xyxy_norm().map(|v| v.clamp(0.0, 1.0));
        let (sw, sh) = (size.width as f64, size.height as f64);
        let bbox = BBox::xyxy_abs(c[0] * sw, c[1] * sh, c[2] * sw, c[3] * sh, size)?;
        out.push(Instance {
            query: q,
            class_id: cls as u32 + 1,
            confidence: conf,
            bbox,
            mask,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub class_id: u32,
    pub confidence: f64,
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
    pub mask: Rle,
}

impl From<&Instance> for InstanceRecord {
    fn from(i: &Instance) -> Self {
        Self {
            class_id: i.class_id,
            confidence: i.confidence,
            bbox: i.bbox.coords(),
            mask: i.mask.to_rle(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<InstanceRecord>,
}

impl ImageRecord {
    pub fn new(image: impl Into<String>, size: ImageSize, instances: &[Instance]) -> Self {
        Self {
            image: image.into(),
            width: size.width,
            height: size.height,
            instances: instances.iter().map(InstanceRecord::from).collect(),
        }
    }
}
