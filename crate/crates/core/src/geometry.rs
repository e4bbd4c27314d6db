//! Axis-aligned boxes, format conversion and pairwise overlap matrices.
//!
//! Three coordinate formats are supported. Detector heads emit normalized
//! center-size boxes; area computations always happen on corner form.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoxFormat {
    /// `(cx, cy, w, h)` normalized to the image extent.
    CxCyWhNorm,
    /// `(x1, y1, x2, y2)` normalized to the image extent.
    XyxyNorm,
    /// `(x1, y1, x2, y2)` in pixels of a known image.
    XyxyAbs,
}

impl BoxFormat {
    pub fn is_absolute(self) -> bool {
        matches!(self, BoxFormat::XyxyAbs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    fn validate(self) -> Result<Self> {
        ensure!(
            self.width > 0 && self.height > 0,
            "degenerate image size {}x{}",
            self.width,
            self.height
        );
        Ok(self)
    }
}

/// A rectangle tagged with its coordinate format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    coords: [f64; 4],
    format: BoxFormat,
    image_size: Option<ImageSize>,
}

impl BBox {
    pub fn cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new([cx, cy, w, h], BoxFormat::CxCyWhNorm, None)
    }

    pub fn xyxy_norm(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new([x1, y1, x2, y2], BoxFormat::XyxyNorm, None)
    }

    pub fn xyxy_abs(x1: f64, y1: f64, x2: f64, y2: f64, size: ImageSize) -> Result<Self> {
        Self::new([x1, y1, x2, y2], BoxFormat::XyxyAbs, Some(size))
    }

    pub fn new(coords: [f64; 4], format: BoxFormat, image_size: Option<ImageSize>) -> Result<Self> {
        ensure!(
            coords.iter().all(|c| c.is_finite()),
            "non-finite box coordinates {coords:?}"
        );
        let image_size = match (format.is_absolute(), image_size) {
            (true, Some(s)) => Some(s.validate()?),
            (true, None) => return Err(Error::invalid("absolute box requires an image size")),
            (false, _) => None,
        };
        match format {
            BoxFormat::CxCyWhNorm => {
                ensure!(
                    coords.iter().all(|c| (0.0..=1.0).contains(c)),
                    "normalized center-size box out of [0,1]: {coords:?}"
                );
            }
            BoxFormat::XyxyNorm | BoxFormat::XyxyAbs => {
                ensure!(
                    coords[0] <= coords[2] && coords[1] <= coords[3],
                    "corner box with inverted edges: {coords:?}"
                );
            }
        }
        Ok(Self {
            coords,
            format,
            image_size,
        })
    }

    pub fn coords(&self) -> [f64; 4] {
        self.coords
    }

    pub fn format(&self) -> BoxFormat {
        self.format
    }

    pub fn image_size(&self) -> Option<ImageSize> {
        self.image_size
    }

    /// Converts to `target`. `image_size` is needed only when the target is
    /// absolute; an absolute source carries its own size.
    pub fn convert(&self, target: BoxFormat, image_size: Option<ImageSize>) -> Result<BBox> {
        convert_box(self, target, image_size)
    }

    /// Corner form in normalized coordinates (`XyxyNorm` layout).
    pub fn to_xyxy_norm(&self) -> [f64; 4] {
        let c = self.coords;
        match self.format {
            BoxFormat::CxCyWhNorm => cxcywh_to_xyxy(c),
            BoxFormat::XyxyNorm => c,
            BoxFormat::XyxyAbs => {
                let s = self.image_size.expect("absolute box always carries a size");
                let (w, h) = (s.width as f64, s.height as f64);
                [c[0] / w, c[1] / h, c[2] / w, c[3] / h]
            }
        }
    }

    pub fn area(&self) -> f64 {
        area(self.corners())
    }

    /// Corner form in the box's own frame (normalized or pixels).
    pub fn corners(&self) -> [f64; 4] {
        match self.format {
            BoxFormat::CxCyWhNorm => cxcywh_to_xyxy(self.coords),
            _ => self.coords,
        }
    }

    fn frame(&self) -> Frame {
        match self.format {
            BoxFormat::XyxyAbs => Frame::Absolute(self.image_size.expect("checked in new")),
            _ => Frame::Normalized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Frame {
    Normalized,
    Absolute(ImageSize),
}

pub fn cxcywh_to_xyxy(c: [f64; 4]) -> [f64; 4] {
    let [cx, cy, w, h] = c;
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

pub fn xyxy_to_cxcywh(c: [f64; 4]) -> [f64; 4] {
    let [x1, y1, x2, y2] = c;
    [0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1]
}

pub fn convert_box(b: &BBox, target: BoxFormat, image_size: Option<ImageSize>) -> Result<BBox> {
    if let Some(s) = image_size {
        s.validate()?;
    }
    if b.format == target {
        return match (target, image_size) {
            (BoxFormat::XyxyAbs, Some(s)) if Some(s) != b.image_size => {
                let n = b.to_xyxy_norm();
                let (w, h) = (s.width as f64, s.height as f64);
                BBox::new([n[0] * w, n[1] * h, n[2] * w, n[3] * h], target, Some(s))
            }
            _ => Ok(*b),
        };
    }
    let norm = b.to_xyxy_norm();
    match target {
        BoxFormat::XyxyNorm => BBox::new(norm, target, None),
        BoxFormat::CxCyWhNorm => {
            let c = xyxy_to_cxcywh(norm);
            BBox::new(c, target, None)
        }
        BoxFormat::XyxyAbs => {
            let s = image_size
                .ok_or_else(|| Error::invalid("conversion to an absolute box needs an image size"))?;
            let (w, h) = (s.width as f64, s.height as f64);
            BBox::new([norm[0] * w, norm[1] * h, norm[2] * w, norm[3] * h], target, Some(s))
        }
    }
}

fn area(c: [f64; 4]) -> f64 {
    (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0)
}

/// IoU of two corner-form boxes. A zero-area union yields 0.
pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU of two corner-form boxes.
pub fn giou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    let hull = area([
        a[0].min(b[0]),
        a[1].min(b[1]),
        a[2].max(b[2]),
        a[3].max(b[3]),
    ]);
    if hull <= 0.0 {
        iou
    } else {
        iou - (hull - union) / hull
    }
}

fn intersection(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

/// Dense row-major real matrix; rows index the first operand.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl PairwiseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(
            values.len() == rows * cols,
            "matrix data length {} does not match {rows}x{cols}",
            values.len()
        );
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            "ragged matrix rows"
        );
        Ok(Self {
            rows: rows.len(),
            cols,
            values: rows.concat(),
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }
}

fn common_frame(a: &[BBox], b: &[BBox]) -> Result<()> {
    let mut frames = a.iter().chain(b).map(BBox::frame);
    if let Some(first) = frames.next() {
        ensure!(
            frames.all(|f| f == first),
            "boxes are not in a common coordinate frame"
        );
    }
    Ok(())
}

fn pairwise(a: &[BBox], b: &[BBox], f: fn([f64; 4], [f64; 4]) -> f64) -> Result<PairwiseMatrix> {
    common_frame(a, b)?;
    let bc: Vec<_> = b.iter().map(BBox::corners).collect();
    let values = a
        .iter()
        .flat_map(|x| {
            let xc = x.corners();
            bc.iter().map(move |&y| f(xc, y))
        })
        .collect();
    PairwiseMatrix::new(a.len(), b.len(), values)
}

pub fn iou_matrix(a: &[BBox], b: &[BBox]) -> Result<PairwiseMatrix> {
    pairwise(a, b, iou_xyxy)
}

pub fn giou_matrix(a: &[BBox], b: &[BBox]) -> Result<PairwiseMatrix> {
    pairwise(a, b, giou_xyxy)
}
