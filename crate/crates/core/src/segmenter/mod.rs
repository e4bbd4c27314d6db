//! Prompted segmenter. Consumes the detector's encoder memory as its image
//! embedding and box prompts; it never sees pixels.

pub mod instances;
pub mod mask_decoder;
pub mod prompt;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::detector::EncoderMemory;
use crate::error::{ensure, Result};
use crate::geometry::{BBox, BoxFormat};
use crate::nn::{key_padding_bias, linear, resize_bilinear};
pub use instances::{assemble_instances, ImageRecord, Instance, InstanceRecord, QueryPrediction};
use mask_decoder::MaskDecoder;
use prompt::PromptEncoder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            embed_dim: 256,
            decoder_layers: 2,
            heads: 8,
            mlp_dim: 512,
        }
    }
}

/// Encoder memory projected to the decoder width, `(B, H*W, c)`.
#[derive(Debug, Clone)]
pub struct ImageEmbedding {
    sequence: Tensor,
    padding: Option<Tensor>,
    height: usize,
    width: usize,
}

impl ImageEmbedding {
    pub fn sequence(&self) -> &Tensor {
        &self.sequence
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn batch_size(&self) -> usize {
        self.sequence.dims()[0]
    }

    /// `(B, c, H, W)` grid.
    pub fn to_spatial(&self) -> Result<Tensor> {
        let (b, _, c) = self.sequence.dims3()?;
        Ok(self
            .sequence
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, c, self.height, self.width))?)
    }
}

/// Normalized `(cx, cy, w, h)` boxes with the batch image each one belongs to.
#[derive(Debug, Clone)]
pub struct BoxPrompts {
    boxes: Tensor,
    image_index: Vec<usize>,
}

impl BoxPrompts {
    pub fn from_tensor(boxes: Tensor, image_index: Vec<usize>) -> Result<Self> {
        let (n, k) = boxes.dims2()?;
        ensure!(k == 4, "box prompts need 4 coordinates, got {k}");
        ensure!(n == image_index.len(), "{n} boxes but {} image indices", image_index.len());
        Ok(Self { boxes, image_index })
    }

    pub fn from_boxes(boxes: &[BBox], image_index: Vec<usize>, dtype: DType, device: &Device) -> Result<Self> {
        let mut flat = Vec::with_capacity(boxes.len() * 4);
        for b in boxes {
            let c = b.convert(BoxFormat::CxCyWhNorm, None)?.coords();
            flat.extend(c.iter().map(|&v| v as f32));
        }
        let t = Tensor::from_vec(flat, (boxes.len(), 4), device)?.to_dtype(dtype)?;
        Self::from_tensor(t, image_index)
    }

    pub fn len(&self) -> usize {
        self.image_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_index.is_empty()
    }

    pub fn boxes(&self) -> &Tensor {
        &self.boxes
    }

    pub fn image_index(&self) -> &[usize] {
        &self.image_index
    }
}

/// Sparse prompt tokens `(N, 2, c)`.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    pub tokens: Tensor,
    pub image_index: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct MaskPrediction {
    /// `(N, 4H, 4W)` logits.
    pub logits: Tensor,
    /// `(N,)` predicted mask quality.
    pub quality: Tensor,
    pub image_index: Vec<usize>,
}

impl MaskPrediction {
    /// Logits bilinearly resized to `(N, height, width)`.
    pub fn resized(&self, height: usize, width: usize) -> Result<Tensor> {
        Ok(resize_bilinear(&self.logits, height, width)?)
    }
}

#[derive(Debug)]
pub struct Segmenter {
    cfg: SegmenterConfig,
    memory_proj: Linear,
    prompt_encoder: PromptEncoder,
    decoder: MaskDecoder,
}

impl Segmenter {
    /// Parameters live under `prompt_encoder.*` and `mask_decoder.*`.
    pub fn new(cfg: &SegmenterConfig, memory_dim: usize, vb: VarBuilder) -> Result<Self> {
        ensure!(cfg.embed_dim % 8 == 0, "segmenter width must be a multiple of 8");
        ensure!(cfg.embed_dim / 2 % cfg.heads == 0, "segmenter heads must divide width/2");
        let md = vb.pp("mask_decoder");
        Ok(Self {
            cfg: cfg.clone(),
            memory_proj: linear(memory_dim, cfg.embed_dim, md.pp("memory_proj"))?,
            prompt_encoder: PromptEncoder::new(cfg.embed_dim, vb.pp("prompt_encoder"))?,
            decoder: MaskDecoder::new(cfg.embed_dim, cfg.decoder_layers, cfg.heads, cfg.mlp_dim, md)?,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.cfg
    }

    /// Projects the encoder memory to the decoder width; the grid layout is
    /// taken from the memory as is.
    pub fn memory_to_embedding(&self, memory: &EncoderMemory) -> Result<ImageEmbedding> {
        let (_, l, _) = memory.sequence.dims3()?;
        ensure!(
            l == memory.height * memory.width,
            "memory length {l} does not match grid {}x{}",
            memory.height,
            memory.width
        );
        Ok(ImageEmbedding {
            sequence: self.memory_proj.forward(&memory.sequence)?,
            padding: memory.padding.clone(),
            height: memory.height,
            width: memory.width,
        })
    }

    pub fn encode_box_prompts(&self, prompts: &BoxPrompts) -> Result<PromptEmbedding> {
        Ok(PromptEmbedding {
            tokens: self.prompt_encoder.encode_boxes(&prompts.boxes)?,
            image_index: prompts.image_index.clone(),
        })
    }

    /// Single box for image 0 of the batch.
    pub fn encode_box_prompt(&self, bbox: &BBox) -> Result<PromptEmbedding> {
        let dev = self.prompt_encoder.no_mask_embed().device().clone();
        let dtype = self.prompt_encoder.no_mask_embed().dtype();
        self.encode_box_prompts(&BoxPrompts::from_boxes(&[bbox.clone()], vec![0], dtype, &dev)?)
    }

    pub fn decode_mask(&self, embedding: &ImageEmbedding, prompts: &PromptEmbedding) -> Result<MaskPrediction> {
        let batch = embedding.batch_size();
        ensure!(
            prompts.image_index.iter().all(|&i| i < batch),
            "prompt refers to an image outside the batch of {batch}"
        );
        let n = prompts.image_index.len();
        let (h, w) = (embedding.height, embedding.width);
        let c = self.cfg.embed_dim;
        let ec = embedding.sequence.dims3()?.2;
        let (pn, pt, pc) = prompts.tokens.dims3()?;
        ensure!(ec == c, "image embedding width {ec} != decoder width {c}");
        ensure!(pc == c, "prompt width {pc} != decoder width {c}");
        ensure!(pn == n && pt == 2, "expected {n} prompts of 2 tokens, got {pn}x{pt}");
        if n == 0 {
            let dev = embedding.sequence.device();
            let dtype = embedding.sequence.dtype();
            return Ok(MaskPrediction {
                logits: Tensor::zeros((0, 4 * h, 4 * w), dtype, dev)?,
                quality: Tensor::zeros(0, dtype, dev)?,
                image_index: vec![],
            });
        }
        let idx: Vec<u32> = prompts.image_index.iter().map(|&i| i as u32).collect();
        let idx = Tensor::new(idx.as_slice(), embedding.sequence.device())?;
        let dense = self
            .prompt_encoder
            .no_mask_embed()
            .reshape((1, 1, c))?;
        let image = embedding
            .sequence
            .index_select(&idx, 0)?
            .broadcast_add(&dense)?;
        let bias = embedding
            .padding
            .as_ref()
            .map(|p| key_padding_bias(&p.index_select(&idx, 0)?, image.dtype()))
            .transpose()?;
        let dense_pe = self.prompt_encoder.dense_pe(h, w)?;
        let out = self
            .decoder
            .forward(&image, h, w, &dense_pe, &prompts.tokens, bias.as_ref())?;
        Ok(MaskPrediction {
            logits: out.logits,
            quality: out.quality,
            image_index: prompts.image_index.clone(),
        })
    }

    /// Memory projection, prompt encoding and mask decoding in one call.
    pub fn segment(&self, memory: &EncoderMemory, prompts: &BoxPrompts) -> Result<MaskPrediction> {
        let emb = self.memory_to_embedding(memory)?;
        let tokens = self.encode_box_prompts(prompts)?;
        self.decode_mask(&emb, &tokens)
    }
}
