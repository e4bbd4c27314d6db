//! Box prompt encoding with random Fourier positional features.

use std::f64::consts::PI;

use candle_core::{Tensor, D};
use candle_nn::{Init, VarBuilder};

/// Encodes normalized 2-D coordinates and box corners into width-`c` tokens.
#[derive(Debug, Clone)]
pub struct PromptEncoder {
    gaussian: Tensor,
    corner_embed: Tensor,
    no_mask_embed: Tensor,
    dim: usize,
}

impl PromptEncoder {
    pub fn new(dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        if dim % 2 != 0 {
            candle_core::bail!("prompt width {dim} must be even");
        }
        let unit = Init::Randn {
            mean: 0.0,
            stdev: 1.0,
        };
        Ok(Self {
            gaussian: vb.get_with_hints((2, dim / 2), "buffer_pe_gaussian", unit)?,
            corner_embed: vb.get_with_hints((2, dim), "corner_embed", unit)?,
            no_mask_embed: vb.get_with_hints(dim, "no_mask_embed", unit)?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(..., 2)` coordinates in [0, 1] as `(x, y)` to `(..., c)` features.
    pub fn encode_coords(&self, coords: &Tensor) -> candle_core::Result<Tensor> {
        let coords = ((coords * 2.0)? - 1.0)?;
        let proj = (coords.broadcast_matmul(&self.gaussian)? * (2.0 * PI))?;
        Tensor::cat(&[proj.sin()?, proj.cos()?], D::Minus1)
    }

    /// Positional features of every embedding cell center, `(H*W, c)`.
    pub fn dense_pe(&self, h: usize, w: usize) -> candle_core::Result<Tensor> {
        let mut grid = Vec::with_capacity(h * w * 2);
        for y in 0..h {
            for x in 0..w {
                grid.push((x as f32 + 0.5) / w as f32);
                grid.push((y as f32 + 0.5) / h as f32);
            }
        }
        let grid = Tensor::from_vec(grid, (h * w, 2), self.gaussian.device())?
            .to_dtype(self.gaussian.dtype())?;
        self.encode_coords(&grid)
    }

    /// Normalized `(cx, cy, w, h)` boxes `(N, 4)` to corner tokens `(N, 2, c)`.
    pub fn encode_boxes(&self, boxes: &Tensor) -> candle_core::Result<Tensor> {
        let n = boxes.dim(0)?;
        let center = boxes.narrow(1, 0, 2)?;
        let half = (boxes.narrow(1, 2, 2)? * 0.5)?;
        let tl = (&center - &half)?.clamp(0.0, 1.0)?;
        let br = (&center + &half)?.clamp(0.0, 1.0)?;
        let corners = Tensor::stack(&[tl, br], 1)?.to_dtype(self.gaussian.dtype())?;
        let pe = self.encode_coords(&corners)?;
        pe.broadcast_add(&self.corner_embed.reshape((1, 2, self.dim))?)?
            .reshape((n, 2, self.dim))
    }

    pub fn no_mask_embed(&self) -> &Tensor {
        &self.no_mask_embed
    }
}
