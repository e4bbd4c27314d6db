//! Set-prediction detector: backbone, transformer encoder over flattened
//! features, and a query decoder with class and box heads.

pub mod backbone;
pub mod transformer;

use candle_core::{DType, Module, Tensor};
use candle_nn::{Init, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::BBox;
use crate::nn::{key_padding_bias, linear, softmax_last, Activation, Mlp};
pub use backbone::{Backbone, BackboneKind, BackboneOutput, CnnBackbone, SwinBackbone, SwinConfig};
use transformer::{positional_encoding_tensor, DecoderLayer, EncoderLayer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub backbone: BackboneKind,
    pub swin: SwinConfig,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_queries: usize,
    /// Object classes, not counting no-object.
    pub num_classes: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Swin,
            swin: SwinConfig::default(),
            d_model: 256,
            encoder_layers: 3,
            decoder_layers: 3,
            heads: 8,
            ffn_dim: 512,
            num_queries: 20,
            num_classes: 2,
        }
    }
}

/// Backbone features as a `(B, H*W, d)` token sequence with its grid size.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    seq: Tensor,
    height: usize,
    width: usize,
}

impl FeatureMap {
    pub fn new(seq: Tensor, height: usize, width: usize) -> Result<Self> {
        let (_, l, _) = seq.dims3()?;
        ensure!(l == height * width, "sequence length {l} != {height}x{width}");
        Ok(Self { seq, height, width })
    }

    /// Collapses a `(B, d, H, W)` volume into a sequence.
    pub fn from_spatial(t: &Tensor) -> Result<Self> {
        let (b, d, h, w) = t.dims4()?;
        let seq = t.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?;
        Self::new(seq, h, w)
    }

    /// `(B, d, H, W)` view.
    pub fn to_spatial(&self) -> Result<Tensor> {
        let (b, _, d) = self.seq.dims3()?;
        Ok(self
            .seq
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, d, self.height, self.width))?)
    }

    pub fn sequence(&self) -> &Tensor {
        &self.seq
    }

    pub fn channels(&self) -> usize {
        self.seq.dims()[2]
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Encoder output over the spatial grid, reused as the segmenter's image
/// embedding.
#[derive(Debug, Clone)]
pub struct EncoderMemory {
    /// `(B, H*W, d)`
    pub sequence: Tensor,
    /// `(H*W, d)` positional encoding added to keys.
    pub pos: Tensor,
    /// `(B, H*W)` u8, 1 on padded cells.
    pub padding: Option<Tensor>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct DetectorOutput {
    /// `(B, Q, C + 1)`; the last class is no-object.
    pub class_logits: Tensor,
    /// `(B, Q, 4)` normalized `(cx, cy, w, h)` in (0, 1).
    pub boxes: Tensor,
    /// `(B, Q, d)`
    pub decoder_embeddings: Tensor,
}

impl DetectorOutput {
    pub fn batch_size(&self) -> usize {
        self.class_logits.dims()[0]
    }

    /// Softmax class probabilities for image `b`, one row per query.
    pub fn class_probs(&self, b: usize) -> Result<Vec<Vec<f64>>> {
        let p = softmax_last(&self.class_logits.get(b)?.to_dtype(DType::F64)?)?;
        Ok(p.to_vec2()?)
    }

    pub fn boxes_for(&self, b: usize) -> Result<Vec<BBox>> {
        let rows: Vec<Vec<f64>> = self.boxes.get(b)?.to_dtype(DType::F64)?.to_vec2()?;
        rows.into_iter()
            .map(|r| {
                let c = [r[0], r[1], r[2], r[3]].map(|v| v.clamp(0.0, 1.0));
                BBox::cxcywh(c[0], c[1], c[2], c[3])
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct Detector {
    cfg: DetectorConfig,
    backbone: Box<dyn Backbone>,
    input_proj: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: crate::nn::LayerNorm,
    query_embed: Tensor,
    class_head: Linear,
    box_head: Mlp,
}

impl Detector {
    /// Parameters are created under `backbone.*`, `encoder.*` and `decoder.*`.
    pub fn new(cfg: &DetectorConfig, vb: VarBuilder) -> Result<Self> {
        ensure!(cfg.num_classes > 0, "detector needs at least one class");
        ensure!(cfg.num_queries > 0, "detector needs at least one query");
        ensure!(
            cfg.d_model % cfg.heads == 0 && cfg.d_model % 4 == 0,
            "d_model {} must be divisible by {} heads and by 4",
            cfg.d_model,
            cfg.heads
        );
        let backbone: Box<dyn Backbone> = match cfg.backbone {
            BackboneKind::Swin => Box::new(SwinBackbone::new(&cfg.swin, vb.pp("backbone"))?),
            BackboneKind::Cnn => Box::new(CnnBackbone::new(
                cfg.swin.stride(),
                cfg.swin.out_channels(),
                vb.pp("backbone"),
            )?),
        };
        let d = cfg.d_model;
        let venc = vb.pp("encoder");
        let vdec = vb.pp("decoder");
        let input_proj = linear(backbone.out_channels(), d, venc.pp("input_proj"))?;
        let encoder = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::new(d, cfg.heads, cfg.ffn_dim, venc.pp(format!("layer{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let decoder = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::new(d, cfg.heads, cfg.ffn_dim, vdec.pp(format!("layer{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let decoder_norm = crate::nn::LayerNorm::new(d, vdec.pp("norm"))?;
        let query_embed = vdec.get_with_hints(
            (cfg.num_queries, d),
            "query_embed",
            Init::Randn {
                mean: 0.0,
                stdev: 1.0,
            },
        )?;
        let class_head = linear(d, cfg.num_classes + 1, vdec.pp("class_head"))?;
        let box_head = Mlp::new(d, d, 4, 3, Activation::Relu, vdec.pp("box_head"))?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            input_proj,
            encoder,
            decoder,
            decoder_norm,
            query_embed,
            class_head,
            box_head,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub fn size_multiple(&self) -> usize {
        self.backbone.size_multiple()
    }

    pub fn backbone_forward(&self, images: &Tensor) -> Result<FeatureMap> {
        self.backbone.forward(images)?.into_feature_map()
    }

    /// Cell-level padding mask from a pixel-level `(B, H0, W0)` mask.
    pub fn feature_padding(&self, pixel_padding: &Tensor, features: &FeatureMap) -> Result<Tensor> {
        let (b, h0, w0) = pixel_padding.dims3()?;
        let s = self.backbone.stride();
        let (h, w) = (features.height(), features.width());
        ensure!(h0 == h * s && w0 == w * s, "padding mask {h0}x{w0} does not match features {h}x{w} at stride {s}");
        Ok(pixel_padding
            .reshape((b, h, s, w, s))?
            .narrow(2, 0, 1)?
            .narrow(4, 0, 1)?
            .contiguous()?
            .reshape((b, h * w))?)
    }

    /// Projects features to `d_model` and runs the encoder stack. `pos` is the
    /// `(H*W, d)` positional encoding.
    pub fn encode(&self, features: &FeatureMap, pos: &Tensor, padding: Option<&Tensor>) -> Result<EncoderMemory> {
        let (hw, d) = pos.dims2()?;
        ensure!(
            hw == features.height() * features.width() && d == self.cfg.d_model,
            "positional encoding {hw}x{d} does not match features {}x{} / d {}",
            features.height(),
            features.width(),
            self.cfg.d_model
        );
        let mut x = self.input_proj.forward(features.sequence())?;
        let pos = pos.to_dtype(x.dtype())?;
        let bias = padding.map(|p| key_padding_bias(p, x.dtype())).transpose()?;
        for layer in &self.encoder {
            x = layer.forward(&x, &pos, bias.as_ref())?;
        }
        Ok(EncoderMemory {
            sequence: x,
            pos,
            padding: padding.cloned(),
            height: features.height(),
            width: features.width(),
        })
    }

    pub fn positional_encoding(&self, features: &FeatureMap) -> Result<Tensor> {
        positional_encoding_tensor(
            features.height(),
            features.width(),
            self.cfg.d_model,
            features.sequence().device(),
        )
    }

    pub fn decode(&self, memory: &EncoderMemory) -> Result<DetectorOutput> {
        self.decode_with_queries(memory, &self.query_embed)
    }

    /// Decodes with explicit `(Q, d)` query embeddings.
    pub fn decode_with_queries(&self, memory: &EncoderMemory, queries: &Tensor) -> Result<DetectorOutput> {
        let (b, _, d) = memory.sequence.dims3()?;
        let (q, qd) = queries.dims2()?;
        if qd != d {
            return Err(Error::invalid(format!("query width {qd} != memory width {d}")));
        }
        let query_pos = queries.unsqueeze(0)?;
        let bias = memory
            .padding
            .as_ref()
            .map(|p| key_padding_bias(p, memory.sequence.dtype()))
            .transpose()?;
        let mut tgt = Tensor::zeros((b, q, d), memory.sequence.dtype(), memory.sequence.device())?;
        for layer in &self.decoder {
            tgt = layer.forward(&tgt, &query_pos, &memory.sequence, &memory.pos, bias.as_ref())?;
        }
        let emb = self.decoder_norm.forward(&tgt)?;
        let class_logits = self.class_head.forward(&emb)?;
        let boxes = candle_nn::ops::sigmoid(&self.box_head.forward(&emb)?)?;
        Ok(DetectorOutput {
            class_logits,
            boxes,
            decoder_embeddings: emb,
        })
    }

    /// Backbone, encoder and decoder in one pass.
    pub fn forward(&self, images: &Tensor, pixel_padding: Option<&Tensor>) -> Result<(DetectorOutput, EncoderMemory)> {
        let features = self.backbone_forward(images)?;
        let padding = pixel_padding
            .map(|p| self.feature_padding(p, &features))
            .transpose()?;
        let pos = self.positional_encoding(&features)?;
        let memory = self.encode(&features, &pos, padding.as_ref())?;
        let out = self.decode(&memory)?;
        Ok((out, memory))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;

    fn small_cfg() -> DetectorConfig {
        DetectorConfig {
            d_model: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 4,
            ffn_dim: 64,
            num_queries: 5,
            num_classes: 3,
            ..Default::default()
        }
    }

    #[test]
    fn flatten_round_trip() {
        let t = Tensor::randn(0f32, 1.0, (2, 6, 3, 5), &Device::Cpu).unwrap();
        let f = FeatureMap::from_spatial(&t).unwrap();
        assert_eq!(f.sequence().dims(), &[2, 15, 6]);
        let back = f.to_spatial().unwrap();
        let diff = (back - &t).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn zero_layer_encoder_is_projection_only() {
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let cfg = DetectorConfig {
            encoder_layers: 0,
            ..small_cfg()
        };
        let det = Detector::new(&cfg, store.var_builder()).unwrap();
        let eye = Tensor::eye(32, DType::F32, &Device::Cpu).unwrap();
        // backbone emits 64 channels; make the projection select the first 32
        let w = Tensor::cat(&[&eye, &Tensor::zeros((32, 32), DType::F32, &Device::Cpu).unwrap()], 1).unwrap();
        store.set("encoder.input_proj.weight", &w).unwrap();
        let seq = Tensor::randn(0f32, 1.0, (1, 16, 64), &Device::Cpu).unwrap();
        let f = FeatureMap::new(seq.clone(), 4, 4).unwrap();
        let pos = det.positional_encoding(&f).unwrap();
        let mem = det.encode(&f, &pos, None).unwrap();
        let expect = seq.narrow(2, 0, 32).unwrap();
        let diff = (mem.sequence - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn encode_rejects_shape_mismatch() {
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let det = Detector::new(&small_cfg(), store.var_builder()).unwrap();
        let f = FeatureMap::new(Tensor::zeros((1, 16, 64), DType::F32, &Device::Cpu).unwrap(), 4, 4).unwrap();
        let bad_pos = positional_encoding_tensor(4, 5, 32, &Device::Cpu).unwrap();
        assert!(det.encode(&f, &bad_pos, None).is_err());
    }

    #[test]
    fn decoder_shapes_and_box_range() {
        let store = ParamStore::new(1, DType::F32, Device::Cpu);
        let det = Detector::new(&small_cfg(), store.var_builder()).unwrap();
        for (h, w) in [(2, 3), (4, 4)] {
            let f = FeatureMap::new(Tensor::randn(0f32, 1.0, (2, h * w, 64), &Device::Cpu).unwrap(), h, w).unwrap();
            let pos = det.positional_encoding(&f).unwrap();
            let mem = det.encode(&f, &pos, None).unwrap();
            assert_eq!(mem.sequence.dims(), &[2, h * w, 32]);
            let flat: Vec<f32> = mem.sequence.flatten_all().unwrap().to_vec1().unwrap();
            assert!(flat.iter().all(|v| v.is_finite()));
            let out = det.decode(&mem).unwrap();
            assert_eq!(out.class_logits.dims(), &[2, 5, 4]);
            assert_eq!(out.boxes.dims(), &[2, 5, 4]);
            let b: Vec<f32> = out.boxes.flatten_all().unwrap().to_vec1().unwrap();
            assert!(b.iter().all(|v| *v > 0.0 && *v < 1.0));
            // distinct queries do not collapse at init
            let rows: Vec<Vec<f32>> = out.class_logits.get(0).unwrap().to_vec2().unwrap();
            assert_ne!(rows[0], rows[1]);
        }
    }
}
