//! Lightweight two-way transformer mask decoder, single-mask output.

use candle_core::{Module, Tensor};
use candle_nn::{Init, Linear, VarBuilder};

use crate::nn::{linear, Activation, Attention, LayerNorm, Mlp};

#[derive(Debug, Clone)]
struct TwoWayLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    token_to_image: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    image_to_token: Attention,
    norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayLayer {
    fn new(dim: usize, heads: usize, mlp_dim: usize, skip_first_pe: bool, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            self_attn: Attention::new(dim, heads, dim, vb.pp("self_attn"))?,
            norm1: LayerNorm::new(dim, vb.pp("norm1"))?,
            token_to_image: Attention::new(dim, heads, dim / 2, vb.pp("token_to_image"))?,
            norm2: LayerNorm::new(dim, vb.pp("norm2"))?,
            mlp: Mlp::new(dim, mlp_dim, dim, 2, Activation::Relu, vb.pp("mlp"))?,
            norm3: LayerNorm::new(dim, vb.pp("norm3"))?,
            image_to_token: Attention::new(dim, heads, dim / 2, vb.pp("image_to_token"))?,
            norm4: LayerNorm::new(dim, vb.pp("norm4"))?,
            skip_first_pe,
        })
    }

    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
        key_bias: Option<&Tensor>,
    ) -> candle_core::Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(queries, queries, queries, None)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries, None)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = keys.broadcast_add(key_pe)?;
        let attn = self.token_to_image.forward(&q, &k, keys, key_bias)?;
        let queries = self.norm2.forward(&(&queries + attn)?)?;

        let queries = self.norm3.forward(&(&queries + self.mlp.forward(&queries)?)?)?;

        let q = (&queries + query_pe)?;
        let attn = self.image_to_token.forward(&k, &q, &queries, None)?;
        let keys = self.norm4.forward(&(keys + attn)?)?;
        Ok((queries, keys))
    }
}

/// Rearranges `(N, H, W, 4C)` into `(N, 2H, 2W, C)`.
fn pixel_shuffle_2x(x: &Tensor) -> candle_core::Result<Tensor> {
    let (n, h, w, c4) = x.dims4()?;
    let c = c4 / 4;
    x.reshape((n, h, w, 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((n, 2 * h, 2 * w, c))
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    output_tokens: Tensor,
    layers: Vec<TwoWayLayer>,
    final_attn: Attention,
    norm_final: LayerNorm,
    upscale1: Linear,
    upscale_norm: LayerNorm,
    upscale2: Linear,
    hyper: Mlp,
    quality_head: Mlp,
    dim: usize,
}

pub struct DecodedMasks {
    /// `(N, 4H, 4W)`
    pub logits: Tensor,
    /// `(N,)`
    pub quality: Tensor,
}

impl MaskDecoder {
    pub fn new(dim: usize, layers: usize, heads: usize, mlp_dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        if dim % 8 != 0 {
            candle_core::bail!("mask decoder width {dim} must be a multiple of 8");
        }
        let output_tokens = vb.get_with_hints(
            (2, dim),
            "output_tokens",
            Init::Randn {
                mean: 0.0,
                stdev: 1.0,
            },
        )?;
        let blocks = (0..layers)
            .map(|i| TwoWayLayer::new(dim, heads, mlp_dim, i == 0, vb.pp(format!("layer{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            output_tokens,
            layers: blocks,
            final_attn: Attention::new(dim, heads, dim / 2, vb.pp("final_attn"))?,
            norm_final: LayerNorm::new(dim, vb.pp("norm_final"))?,
            upscale1: linear(dim, dim, vb.pp("upscale1"))?,
            upscale_norm: LayerNorm::new(dim / 4, vb.pp("upscale_norm"))?,
            upscale2: linear(dim / 4, dim / 2, vb.pp("upscale2"))?,
            hyper: Mlp::new(dim, dim, dim / 8, 3, Activation::Relu, vb.pp("hyper"))?,
            quality_head: Mlp::new(dim, 256, 1, 3, Activation::Relu, vb.pp("quality_head"))?,
            dim,
        })
    }

    /// `image` is `(N, H*W, c)` (one embedding per prompt), `dense_pe` is
    /// `(H*W, c)`, `sparse` is `(N, T, c)` prompt tokens.
    pub fn forward(
        &self,
        image: &Tensor,
        h: usize,
        w: usize,
        dense_pe: &Tensor,
        sparse: &Tensor,
        key_bias: Option<&Tensor>,
    ) -> candle_core::Result<DecodedMasks> {
        let (n, _, c) = image.dims3()?;
        let out_tokens = self.output_tokens.unsqueeze(0)?.broadcast_as((n, 2, c))?;
        let tokens = Tensor::cat(&[&out_tokens, sparse], 1)?;
        let key_pe = dense_pe.unsqueeze(0)?;

        let mut queries = tokens.clone();
        let mut keys = image.clone();
        for layer in &self.layers {
            (queries, keys) = layer.forward(&queries, &keys, &tokens, &key_pe, key_bias)?;
        }
        let q = (&queries + &tokens)?;
        let k = keys.broadcast_add(&key_pe)?;
        let attn = self.final_attn.forward(&q, &k, &keys, key_bias)?;
        let queries = self.norm_final.forward(&(&queries + attn)?)?;

        let quality_token = queries.narrow(1, 0, 1)?.squeeze(1)?;
        let mask_token = queries.narrow(1, 1, 1)?.squeeze(1)?;

        let grid = keys.reshape((n, h, w, c))?;
        let up = pixel_shuffle_2x(&self.upscale1.forward(&grid)?)?;
        let up = self.upscale_norm.forward(&up)?.gelu()?;
        let up = pixel_shuffle_2x(&self.upscale2.forward(&up)?)?.gelu()?;
        let (_, uh, uw, uc) = up.dims4()?;

        let hyper = self.hyper.forward(&mask_token)?.reshape((n, uc, 1))?;
        let logits = up
            .reshape((n, uh * uw, uc))?
            .matmul(&hyper)?
            .reshape((n, uh, uw))?;
        let quality = self.quality_head.forward(&quality_token)?.reshape(n)?;
        Ok(DecodedMasks { logits, quality })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn pixel_shuffle_moves_channels_to_space() {
        let x = Tensor::arange(0f32, 8.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 2, 4))
            .unwrap()
            .to_dtype(DType::F32)
            .unwrap();
        let y = pixel_shuffle_2x(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4, 1]);
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        // pixel (0,0) expands into rows [0,1] / [2,3]; pixel (0,1) into [4,5] / [6,7]
        assert_eq!(v, vec![0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
    }
}
