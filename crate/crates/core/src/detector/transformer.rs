//! Post-norm transformer encoder/decoder over flattened image features.

use candle_core::{Device, Module, Tensor};
use candle_nn::{Linear, VarBuilder};

use crate::error::{ensure, Result};
use crate::nn::{linear, Attention, LayerNorm};

/// Sinusoidal 2-D encoding, `H * W` rows of width `d`. The first half of each
/// row encodes the row index, the second half the column index, as
/// interleaved `(sin, cos)` pairs with geometric frequencies.
pub fn positional_encoding_2d(h: usize, w: usize, d: usize) -> Result<Vec<f32>> {
    ensure!(d % 4 == 0 && d > 0, "positional encoding width {d} must be a positive multiple of 4");
    let half = d / 2;
    let pairs = half / 2;
    let freqs: Vec<f64> = (0..pairs)
        .map(|i| 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64))
        .collect();
    let mut out = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            for pos in [r as f64, c as f64] {
                for f in &freqs {
                    out.push((pos * f).sin() as f32);
                    out.push((pos * f).cos() as f32);
                }
            }
        }
    }
    Ok(out)
}

pub fn positional_encoding_tensor(h: usize, w: usize, d: usize, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(positional_encoding_2d(h, w, d)?, (h * w, d), device)?)
}

#[derive(Debug, Clone)]
struct Ffn {
    l1: Linear,
    l2: Linear,
}

impl Ffn {
    fn new(d: usize, hidden: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            l1: linear(d, hidden, vb.pp("l1"))?,
            l2: linear(hidden, d, vb.pp("l2"))?,
        })
    }
}

impl Module for Ffn {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.l2.forward(&self.l1.forward(x)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    attn: Attention,
    norm1: LayerNorm,
    ffn: Ffn,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(d: usize, heads: usize, ffn: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            attn: Attention::new(d, heads, d, vb.pp("attn"))?,
            norm1: LayerNorm::new(d, vb.pp("norm1"))?,
            ffn: Ffn::new(d, ffn, vb.pp("ffn"))?,
            norm2: LayerNorm::new(d, vb.pp("norm2"))?,
        })
    }

    /// `src` is `(B, L, d)`, `pos` broadcasts to it.
    pub fn forward(&self, src: &Tensor, pos: &Tensor, bias: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let qk = src.broadcast_add(pos)?;
        let x = self.norm1.forward(&(src + self.attn.forward(&qk, &qk, src, bias)?)?)?;
        self.norm2.forward(&(&x + self.ffn.forward(&x)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_attn: Attention,
    norm2: LayerNorm,
    ffn: Ffn,
    norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(d: usize, heads: usize, ffn: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            self_attn: Attention::new(d, heads, d, vb.pp("self_attn"))?,
            norm1: LayerNorm::new(d, vb.pp("norm1"))?,
            cross_attn: Attention::new(d, heads, d, vb.pp("cross_attn"))?,
            norm2: LayerNorm::new(d, vb.pp("norm2"))?,
            ffn: Ffn::new(d, ffn, vb.pp("ffn"))?,
            norm3: LayerNorm::new(d, vb.pp("norm3"))?,
        })
    }

    pub fn forward(
        &self,
        tgt: &Tensor,
        query_pos: &Tensor,
        memory: &Tensor,
        memory_pos: &Tensor,
        memory_bias: Option<&Tensor>,
    ) -> candle_core::Result<Tensor> {
        let q = tgt.broadcast_add(query_pos)?;
        let x = self.norm1.forward(&(tgt + self.self_attn.forward(&q, &q, tgt, None)?)?)?;
        let q = x.broadcast_add(query_pos)?;
        let k = memory.broadcast_add(memory_pos)?;
        let x = self
            .norm2
            .forward(&(&x + self.cross_attn.forward(&q, &k, memory, memory_bias)?)?)?;
        self.norm3.forward(&(&x + self.ffn.forward(&x)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn origin_is_sin_zero_cos_one() {
        let d = 16;
        let pe = positional_encoding_2d(3, 3, d).unwrap();
        for (i, v) in pe[..d].iter().enumerate() {
            if i % 2 == 0 {
                assert_eq!(*v, 0.0);
            } else {
                assert_eq!(*v, 1.0);
            }
        }
    }

    #[test]
    fn rejects_width_not_multiple_of_four() {
        assert!(positional_encoding_2d(2, 2, 6).is_err());
    }

    #[test]
    fn all_positions_distinct_up_to_64() {
        let (h, w, d) = (64, 64, 256);
        let pe = positional_encoding_2d(h, w, d).unwrap();
        let rows: HashSet<Vec<u32>> = pe
            .chunks(d)
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(rows.len(), h * w);
        // pure function of (row, col): a larger grid agrees on the shared cells
        let big = positional_encoding_2d(h + 3, w + 5, d).unwrap();
        for r in [0, 17, 63] {
            for c in [0, 9, 63] {
                let a = &pe[(r * w + c) * d..(r * w + c + 1) * d];
                let b = &big[(r * (w + 5) + c) * d..(r * (w + 5) + c + 1) * d];
                assert_eq!(a, b);
            }
        }
    }
}
