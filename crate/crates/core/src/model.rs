//! Detector and segmenter sharing one parameter store, plus inference.

use candle_core::{DType, Device, Tensor};

use crate::config::RunConfig;
use crate::data::{Batch, ClassCatalog, SampleMeta};
use crate::detector::{Detector, DetectorOutput, EncoderMemory};
use crate::error::Result;
use crate::geometry::{BBox, ImageSize};
use crate::nn::{resize_bilinear, ParamStore};
use crate::segmenter::{assemble_instances, BoxPrompts, Instance, QueryPrediction, Segmenter};

/// Parameter name prefixes, one per trainable component.
pub const PARAM_GROUPS: [&str; 5] = ["backbone", "encoder", "decoder", "prompt_encoder", "mask_decoder"];

pub fn group_of(name: &str) -> Option<&'static str> {
    let head = name.split('.').next()?;
    PARAM_GROUPS.iter().copied().find(|g| *g == head)
}

#[derive(Debug)]
pub struct Model {
    store: ParamStore,
    detector: Detector,
    segmenter: Segmenter,
    catalog: ClassCatalog,
    config: RunConfig,
}

/// Everything inferred for one image, in original pixel coordinates.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub name: String,
    pub size: ImageSize,
    /// Queries above the score threshold with their masks.
    pub instances: Vec<Instance>,
    /// Every query as `(class id, confidence, xyxy)`, for ranking metrics.
    pub detections: Vec<(u32, f64, [f64; 4])>,
}

impl Model {
    pub fn new(config: &RunConfig, catalog: ClassCatalog, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(config.seed, DType::F32, device.clone());
        let vb = store.var_builder();
        let detector = Detector::new(&config.detector_config(catalog.len()), vb.clone())?;
        let segmenter = Segmenter::new(&config.segmenter_config(), config.d_model, vb)?;
        Ok(Self {
            store,
            detector,
            segmenter,
            catalog,
            config: config.clone(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn segmenter(&self) -> &Segmenter {
        &self.segmenter
    }

    pub fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Canvas sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.detector.size_multiple()
    }

    pub fn forward(&self, batch: &Batch) -> Result<(DetectorOutput, EncoderMemory)> {
        self.detector.forward(&batch.images, batch.pixel_padding.as_ref())
    }

    /// Detection, box prompting from confident queries, and mask decoding.
    pub fn predict(&self, batch: &Batch, threshold: f64) -> Result<Vec<Prediction>> {
        let (det, memory) = self.forward(batch)?;
        let canvas = batch.canvas;
        let mut per_image = Vec::new();
        let mut prompt_boxes = Vec::new();
        let mut prompt_image = Vec::new();
        for (b, meta) in batch.meta.iter().enumerate() {
            let probs = det.class_probs(b)?;
            let boxes = det.boxes_for(b)?;
            let mut queries = Vec::with_capacity(probs.len());
            let mut detections = Vec::with_capacity(probs.len());
            let mut kept = Vec::new();
            for (q, (p, bx)) in probs.into_iter().zip(boxes).enumerate() {
                let xyxy = meta.to_original_xyxy(bx.coords(), canvas);
                let pred = QueryPrediction {
                    class_probs: p,
                    bbox: original_norm_box(xyxy, meta.original)?,
                };
                if let Some((cls, conf)) = pred.best_class() {
                    detections.push((cls as u32 + 1, conf, xyxy));
                    if conf > threshold {
                        kept.push(q);
                        prompt_boxes.push(bx);
                        prompt_image.push(b);
                    }
                }
                queries.push(pred);
            }
            per_image.push((queries, detections, kept));
        }

        let prompts = BoxPrompts::from_boxes(&prompt_boxes, prompt_image, DType::F32, self.device())?;
        let masks = self.segmenter.segment(&memory, &prompts)?;
        let up = masks.resized(canvas.height as usize, canvas.width as usize)?;

        let mut out = Vec::with_capacity(per_image.len());
        let mut row = 0;
        for ((queries, detections, kept), meta) in per_image.into_iter().zip(&batch.meta) {
            let mut mask_probs: Vec<Option<Vec<f32>>> = vec![None; queries.len()];
            if !kept.is_empty() {
                let logits = up.narrow(0, row, kept.len())?;
                row += kept.len();
                let probs = to_original(&logits, meta)?;
                for (i, &q) in kept.iter().enumerate() {
                    mask_probs[q] = Some(probs.get(i)?.flatten_all()?.to_vec1()?);
                }
            }
            let instances = assemble_instances(&queries, &mask_probs, meta.original, threshold)?;
            out.push(Prediction {
                name: meta.name.clone(),
                size: meta.original,
                instances,
                detections,
            });
        }
        Ok(out)
    }
}

fn original_norm_box(xyxy: [f64; 4], size: ImageSize) -> Result<BBox> {
    let (w, h) = (size.width as f64, size.height as f64);
    BBox::xyxy_norm(xyxy[0] / w, xyxy[1] / h, xyxy[2] / w, xyxy[3] / h)
}

/// Canvas logits `(N, Hc, Wc)` to probabilities over the original image.
fn to_original(logits: &Tensor, meta: &SampleMeta) -> Result<Tensor> {
    let (rw, rh) = (meta.resized.width as usize, meta.resized.height as usize);
    let crop = logits.narrow(1, 0, rh)?.narrow(2, 0, rw)?;
    let (ow, oh) = (meta.original.width as usize, meta.original.height as usize);
    let full = resize_bilinear(&crop, oh, ow)?;
    Ok(candle_nn::ops::sigmoid(&full)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collate, synth_shapes};

    pub(crate) fn tiny_config() -> RunConfig {
        RunConfig {
            d_model: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 4,
            ffn_dim: 64,
            num_queries: 6,
            mask_dim: 32,
            mask_heads: 4,
            mask_mlp_dim: 64,
            swin_dim: 16,
            image_size: 64,
            ..Default::default()
        }
    }

    #[test]
    fn groups_cover_every_parameter() {
        let d = synth_shapes(0, 1, 64, 2).unwrap();
        let m = Model::new(&tiny_config(), d.catalog, &Device::Cpu).unwrap();
        for (name, _) in m.store().named_vars() {
            assert!(group_of(&name).is_some(), "{name}");
        }
        for g in PARAM_GROUPS {
            assert!(m.store().trainable_vars().iter().any(|(n, _)| group_of(n) == Some(g)), "{g}");
        }
    }

    #[test]
    fn predict_respects_threshold() {
        let d = synth_shapes(0, 2, 64, 2).unwrap();
        let m = Model::new(&tiny_config(), d.catalog.clone(), &Device::Cpu).unwrap();
        let refs: Vec<_> = d.samples.iter().collect();
        let batch = collate(&refs, 64, m.size_multiple(), &Default::default(), &Device::Cpu).unwrap();
        let all = m.predict(&batch, 0.0).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].instances.len(), 6);
        assert_eq!(all[0].detections.len(), 6);
        for inst in &all[0].instances {
            assert_eq!((inst.mask.width(), inst.mask.height()), (64, 64));
        }
        let none = m.predict(&batch, 1.0).unwrap();
        assert!(none.iter().all(|p| p.instances.is_empty()));
    }
}
