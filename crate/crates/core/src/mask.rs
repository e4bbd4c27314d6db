//! Binary masks and their run-length encoding.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{BBox, ImageSize};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        ensure!(
            data.len() == width * height,
            "mask data length {} does not match {width}x{height}",
            data.len()
        );
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> ImageSize {
        ImageSize::new(self.width as u32, self.height as u32)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        ensure!(self.same_shape(other), "mask shape mismatch in union");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    /// Tight bounding rectangle with exclusive max edges, in pixels.
    pub fn bounding_box(&self) -> Result<BBox> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            if let Some(first) = row.iter().position(|&b| b) {
                let last = row.iter().rposition(|&b| b).expect("row has a set pixel");
                x1 = x1.min(first);
                x2 = x2.max(last + 1);
                y1 = y1.min(y);
                y2 = y + 1;
            }
        }
        if x1 == usize::MAX {
            return Err(Error::Data("bounding box of an empty mask".into()));
        }
        BBox::xyxy_abs(x1 as f64, y1 as f64, x2 as f64, y2 as f64, self.size())
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.data {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        Rle {
            height: self.height,
            width: self.width,
            counts,
        }
    }
}

/// Row-major run lengths, alternating background/foreground and starting with
/// a (possibly empty) background run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn decode(&self) -> Result<BinaryMask> {
        let mut data = Vec::with_capacity(self.width * self.height);
        let mut value = false;
        for &c in &self.counts {
            data.extend(std::iter::repeat_n(value, c as usize));
            value = !value;
        }
        BinaryMask::from_vec(self.width, self.height, data)
            .map_err(|_| Error::Data("run lengths do not cover the mask".into()))
    }
}
