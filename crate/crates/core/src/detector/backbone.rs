//! Image backbones.
//!
//! The shifted-window transformer already works on token sequences, so its
//! output is a [`FeatureMap`] directly. The convolutional stand-in produces a
//! spatial volume that has to be collapsed into a sequence before the encoder.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Init, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{linear, linear_no_bias, softmax_last, Activation, LayerNorm, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Swin,
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwinConfig {
    pub patch_size: usize,
    pub window_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub mlp_ratio: usize,
}

impl Default for SwinConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            window_size: 4,
            embed_dim: 32,
            depths: vec![2, 2],
            heads: vec![2, 4],
            mlp_ratio: 4,
        }
    }
}

impl SwinConfig {
    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    /// Total downsampling factor from pixels to output tokens.
    pub fn stride(&self) -> usize {
        self.patch_size << (self.stages() - 1)
    }

    pub fn out_channels(&self) -> usize {
        self.embed_dim << (self.stages() - 1)
    }

    /// Input sides must be multiples of this; smaller inputs are padded.
    pub fn size_multiple(&self) -> usize {
        self.stride() * self.window_size
    }
}

/// Raw backbone output: either already a token sequence or a spatial volume.
#[derive(Debug, Clone)]
pub enum BackboneOutput {
    Sequence(FeatureMap),
    /// `(B, d, H, W)`
    Spatial(Tensor),
}

impl BackboneOutput {
    /// Sequence view consumed by the encoder; spatial outputs are collapsed.
    pub fn into_feature_map(self) -> Result<FeatureMap> {
        match self {
            BackboneOutput::Sequence(f) => Ok(f),
            BackboneOutput::Spatial(t) => FeatureMap::from_spatial(&t),
        }
    }
}

pub trait Backbone: Send + Sync + std::fmt::Debug {
    /// `images` is `(B, 3, H0, W0)` with sides multiple of [`Backbone::size_multiple`].
    fn forward(&self, images: &Tensor) -> Result<BackboneOutput>;
    fn out_channels(&self) -> usize;
    fn stride(&self) -> usize;
    fn size_multiple(&self) -> usize;
}

/// Splits `(B, H, W, C)` into `(B * nW, w * w, C)` windows in raster order.
pub fn window_partition(x: &Tensor, window: usize) -> candle_core::Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    x.reshape((b, h / window, window, w / window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / window) * (w / window), window * window, c))
}

/// Inverse of [`window_partition`].
pub fn window_reverse(windows: &Tensor, window: usize, h: usize, w: usize) -> candle_core::Result<Tensor> {
    let (n, _, c) = windows.dims3()?;
    let b = n / ((h / window) * (w / window));
    windows
        .reshape((b, h / window, w / window, window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, w, c))
}

// Region labels for the cyclic-shift mask: pairs in different regions of one
// window must not attend to each other.
fn shift_mask(h: usize, w: usize, window: usize, shift: usize) -> Vec<f32> {
    let region = |p: usize, len: usize| {
        if p < len - window {
            0
        } else if p < len - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / window, w / window);
    let n = window * window;
    let mut out = vec![0f32; nh * nw * n * n];
    for wy in 0..nh {
        for wx in 0..nw {
            let labels: Vec<usize> = (0..n)
                .map(|i| {
                    let (y, x) = (wy * window + i / window, wx * window + i % window);
                    region(y, h) * 3 + region(x, w)
                })
                .collect();
            let base = (wy * nw + wx) * n * n;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] != labels[j] {
                        out[base + i * n + j] = -100.0;
                    }
                }
            }
        }
    }
    out
}

fn relative_position_index(window: usize) -> Vec<u32> {
    let n = window * window;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = (i / window) as i64 - (j / window) as i64 + window as i64 - 1;
            let dx = (i % window) as i64 - (j % window) as i64 + window as i64 - 1;
            idx.push((dy * (2 * window as i64 - 1) + dx) as u32);
        }
    }
    idx
}

#[derive(Debug, Clone)]
struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias_table: Tensor,
    bias_index: Tensor,
    heads: usize,
    head_dim: usize,
    window: usize,
}

impl WindowAttention {
    fn new(dim: usize, heads: usize, window: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let table = vb.get_with_hints(
            ((2 * window - 1) * (2 * window - 1), heads),
            "relative_bias",
            Init::Randn {
                mean: 0.0,
                stdev: 0.02,
            },
        )?;
        let index = Tensor::new(relative_position_index(window), vb.device())?;
        Ok(Self {
            qkv: linear(dim, 3 * dim, vb.pp("qkv"))?,
            proj: linear(dim, dim, vb.pp("proj"))?,
            bias_table: table,
            bias_index: index,
            heads,
            head_dim: dim / heads,
            window,
        })
    }

    fn position_bias(&self) -> candle_core::Result<Tensor> {
        let n = self.window * self.window;
        self.bias_table
            .index_select(&self.bias_index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .unsqueeze(0)
    }

    /// `x` is `(B * nW, N, C)`; `mask` is `(nW, N, N)` for shifted blocks.
    fn probs_and_values(&self, x: &Tensor, mask: Option<&Tensor>) -> candle_core::Result<(Tensor, Tensor)> {
        let (bw, n, _) = x.dims3()?;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((bw, n, 3, self.heads, self.head_dim))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (self.head_dim as f64).sqrt())?
            .broadcast_add(&self.position_bias()?)?;
        let scores = match mask {
            Some(m) => {
                let nw = m.dim(0)?;
                scores
                    .reshape((bw / nw, nw, self.heads, n, n))?
                    .broadcast_add(&m.unsqueeze(1)?.unsqueeze(0)?)?
                    .reshape((bw, self.heads, n, n))?
            }
            None => scores,
        };
        Ok((softmax_last(&scores)?, v))
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let (bw, n, c) = x.dims3()?;
        let (p, v) = self.probs_and_values(x, mask)?;
        let ctx = p.matmul(&v)?.transpose(1, 2)?.reshape((bw, n, c))?;
        self.proj.forward(&ctx)
    }
}

#[derive(Debug, Clone)]
struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    window: usize,
    shift: usize,
}

impl SwinBlock {
    fn new(
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_ratio: usize,
        vb: VarBuilder,
    ) -> candle_core::Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(dim, vb.pp("norm1"))?,
            attn: WindowAttention::new(dim, heads, window, vb.pp("attn"))?,
            norm2: LayerNorm::new(dim, vb.pp("norm2"))?,
            mlp: Mlp::new(dim, dim * mlp_ratio, dim, 2, Activation::Gelu, vb.pp("mlp"))?,
            window,
            shift,
        })
    }

    fn attn_mask(&self, h: usize, w: usize, dtype: DType, dev: &Device) -> candle_core::Result<Option<Tensor>> {
        if self.shift == 0 {
            return Ok(None);
        }
        let n = self.window * self.window;
        let nw = (h / self.window) * (w / self.window);
        let m = Tensor::from_vec(shift_mask(h, w, self.window, self.shift), (nw, n, n), dev)?;
        Ok(Some(m.to_dtype(dtype)?))
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (_, h, w, _) = x.dims4()?;
        let mut y = self.norm1.forward(x)?;
        if self.shift > 0 {
            let s = self.shift as i32;
            y = y.roll(-s, 1)?.roll(-s, 2)?;
        }
        let windows = window_partition(&y, self.window)?;
        let mask = self.attn_mask(h, w, x.dtype(), x.device())?;
        let windows = self.attn.forward(&windows, mask.as_ref())?;
        let mut y = window_reverse(&windows, self.window, h, w)?;
        if self.shift > 0 {
            let s = self.shift as i32;
            y = y.roll(s, 1)?.roll(s, 2)?;
        }
        let x = (x + y)?;
        &x + self.mlp.forward(&self.norm2.forward(&x)?)?
    }
}

#[derive(Debug, Clone)]
struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
}

impl PatchMerging {
    fn new(dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(4 * dim, vb.pp("norm"))?,
            reduction: linear_no_bias(4 * dim, 2 * dim, vb.pp("reduction"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let x = x
            .reshape((b, h / 2, 2, w / 2, 2, c))?
            .permute((0, 1, 3, 4, 2, 5))?
            .contiguous()?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        self.reduction.forward(&self.norm.forward(&x)?)
    }
}

/// Hierarchical shifted-window transformer.
#[derive(Debug)]
pub struct SwinBackbone {
    cfg: SwinConfig,
    patch_embed: Linear,
    patch_norm: LayerNorm,
    stages: Vec<(Vec<SwinBlock>, Option<PatchMerging>)>,
    out_norm: LayerNorm,
}

impl SwinBackbone {
    pub fn new(cfg: &SwinConfig, vb: VarBuilder) -> Result<Self> {
        if cfg.depths.is_empty() || cfg.depths.len() != cfg.heads.len() {
            return Err(Error::Config("swin depths and heads must be nonempty and equal length".into()));
        }
        let p = cfg.patch_size;
        let patch_embed = linear(3 * p * p, cfg.embed_dim, vb.pp("patch_embed"))?;
        let patch_norm = LayerNorm::new(cfg.embed_dim, vb.pp("patch_norm"))?;
        let mut stages = Vec::new();
        let mut dim = cfg.embed_dim;
        for (s, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.heads).enumerate() {
            if dim % heads != 0 {
                return Err(Error::Config(format!("stage {s}: dim {dim} not divisible by {heads} heads")));
            }
            let vbs = vb.pp(format!("stage{s}"));
            let blocks = (0..depth)
                .map(|i| {
                    let shift = if i % 2 == 1 { cfg.window_size / 2 } else { 0 };
                    SwinBlock::new(dim, heads, cfg.window_size, shift, cfg.mlp_ratio, vbs.pp(format!("block{i}")))
                })
                .collect::<candle_core::Result<Vec<_>>>()?;
            let merge = if s + 1 < cfg.depths.len() {
                let m = PatchMerging::new(dim, vbs.pp("merge"))?;
                dim *= 2;
                Some(m)
            } else {
                None
            };
            stages.push((blocks, merge));
        }
        let out_norm = LayerNorm::new(dim, vb.pp("out_norm"))?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            patch_norm,
            stages,
            out_norm,
        })
    }

    fn patchify(&self, images: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        let p = self.cfg.patch_size;
        let x = images
            .reshape((b, c, h / p, p, w / p, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, h / p, w / p, c * p * p))?;
        self.patch_norm.forward(&self.patch_embed.forward(&x)?)
    }

    /// Softmax probabilities of the first attention block, `(B * nW, heads, N, N)`.
    pub fn first_block_attention(&self, images: &Tensor) -> Result<Tensor> {
        let x = self.patchify(images)?;
        let block = &self.stages[0].0[0];
        let y = block.norm1.forward(&x)?;
        let windows = window_partition(&y, block.window)?;
        Ok(block.attn.probs_and_values(&windows, None)?.0)
    }
}

impl Backbone for SwinBackbone {
    fn forward(&self, images: &Tensor) -> Result<BackboneOutput> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::invalid(format!("expected 3 image channels, got {c}")));
        }
        let m = self.size_multiple();
        let p = self.cfg.patch_size;
        if h / p < self.cfg.window_size || w / p < self.cfg.window_size {
            return Err(Error::invalid(format!(
                "image {h}x{w} is smaller than one {}-token window after {p}x{p} patching",
                self.cfg.window_size
            )));
        }
        if h % m != 0 || w % m != 0 {
            return Err(Error::invalid(format!("image {h}x{w} is not padded to a multiple of {m}")));
        }
        let mut x = self.patchify(images)?;
        for (blocks, merge) in &self.stages {
            for b in blocks {
                x = b.forward(&x)?;
            }
            if let Some(m) = merge {
                x = m.forward(&x)?;
            }
        }
        let x = self.out_norm.forward(&x)?;
        let (b, fh, fw, d) = x.dims4()?;
        Ok(BackboneOutput::Sequence(FeatureMap::new(
            x.reshape((b, fh * fw, d))?,
            fh,
            fw,
        )?))
    }

    fn out_channels(&self) -> usize {
        self.cfg.out_channels()
    }

    fn stride(&self) -> usize {
        self.cfg.stride()
    }

    fn size_multiple(&self) -> usize {
        self.cfg.size_multiple()
    }
}

/// Small strided CNN standing in for a residual-network backbone.
#[derive(Debug)]
pub struct CnnBackbone {
    convs: Vec<Conv2d>,
    out_channels: usize,
    stride: usize,
}

impl CnnBackbone {
    /// `stride` must be a power of two; one 3x3 stride-2 conv per halving.
    pub fn new(stride: usize, out_channels: usize, vb: VarBuilder) -> Result<Self> {
        if !stride.is_power_of_two() || stride < 2 {
            return Err(Error::Config(format!("cnn stride {stride} must be a power of two >= 2")));
        }
        let n = stride.trailing_zeros() as usize;
        let cfg = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let mut convs = Vec::with_capacity(n);
        let mut cin = 3;
        for i in 0..n {
            let cout = if i + 1 == n {
                out_channels
            } else {
                (out_channels >> (n - 1 - i)).max(16)
            };
            convs.push(candle_nn::conv2d(cin, cout, 3, cfg, vb.pp(format!("conv{i}")))?);
            cin = cout;
        }
        Ok(Self {
            convs,
            out_channels,
            stride,
        })
    }
}

impl Backbone for CnnBackbone {
    fn forward(&self, images: &Tensor) -> Result<BackboneOutput> {
        let (_, _, h, w) = images.dims4()?;
        if h % self.stride != 0 || w % self.stride != 0 || h < self.stride || w < self.stride {
            return Err(Error::invalid(format!("image {h}x{w} is not a multiple of {}", self.stride)));
        }
        let mut x = images.clone();
        for (i, c) in self.convs.iter().enumerate() {
            x = c.forward(&x)?;
            if i + 1 < self.convs.len() {
                x = x.relu()?;
            }
        }
        Ok(BackboneOutput::Spatial(x))
    }

    fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn stride(&self) -> usize {
        self.stride
    }

    fn size_multiple(&self) -> usize {
        self.stride
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    use candle_core::D;

    fn row_sums(p: &Tensor) -> candle_core::Result<Vec<f32>> {
        p.sum(D::Minus1)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1()
    }
    use crate::nn::ParamStore;

    #[test]
    fn toy_swin_output_shape() {
        let cfg = SwinConfig::default();
        // downsampling computed independently: 128 / 4 / 2 = 16, channels 32 * 2 = 64
        assert_eq!((128 / 4 / 2, 32 * 2), (16, 64));
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let bb = SwinBackbone::new(&cfg, store.var_builder().pp("backbone")).unwrap();
        let img = Tensor::rand(0f32, 1.0, (1, 3, 128, 128), &Device::Cpu).unwrap();
        let f = bb.forward(&img).unwrap().into_feature_map().unwrap();
        assert_eq!((f.channels(), f.height(), f.width()), (64, 16, 16));
        assert_eq!(f.sequence().dims(), &[1, 256, 64]);
    }

    #[test]
    fn window_round_trip() {
        let x = Tensor::randn(0f32, 1.0, (2, 8, 12, 5), &Device::Cpu).unwrap();
        let w = window_partition(&x, 4).unwrap();
        assert_eq!(w.dims(), &[2 * 2 * 3, 16, 5]);
        let back = window_reverse(&w, 4, 8, 12).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn window_attention_rows_sum_to_one() {
        let store = ParamStore::new(5, DType::F32, Device::Cpu);
        let bb = SwinBackbone::new(&SwinConfig::default(), store.var_builder().pp("backbone")).unwrap();
        let img = Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let p = bb.first_block_attention(&img).unwrap();
        for s in row_sums(&p).unwrap() {
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn too_small_image_rejected() {
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let bb = SwinBackbone::new(&SwinConfig::default(), store.var_builder()).unwrap();
        let img = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(bb.forward(&img), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn shift_mask_separates_wrapped_regions() {
        // 8x8 tokens, window 4, shift 2: the last window row/col mixes regions
        let m = shift_mask(8, 8, 4, 2);
        let n = 16;
        // window 0 is entirely region (0,0)
        assert!(m[..n * n].iter().all(|&v| v == 0.0));
        // window 3 (bottom-right) has four regions, so some pairs are masked
        assert!(m[3 * n * n..4 * n * n].iter().any(|&v| v < 0.0));
    }

    #[test]
    fn cnn_needs_explicit_collapse() {
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let bb = CnnBackbone::new(8, 64, store.var_builder().pp("backbone")).unwrap();
        let img = Tensor::rand(0f32, 1.0, (2, 3, 64, 32), &Device::Cpu).unwrap();
        let out = bb.forward(&img).unwrap();
        let BackboneOutput::Spatial(t) = &out else {
            panic!("cnn must return a spatial volume");
        };
        assert_eq!(t.dims(), &[2, 64, 8, 4]);
        let f = out.into_feature_map().unwrap();
        assert_eq!(f.sequence().dims(), &[2, 32, 64]);
    }
}
