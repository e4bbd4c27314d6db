//! Flat run configuration, read from TOML with `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Normalization, SplitSpec};
use crate::detector::{BackboneKind, DetectorConfig, SwinConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::matching::CostWeights;
use crate::segmenter::SegmenterConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

/// Which boxes prompt the segmenter during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    /// Ground-truth boxes of matched pairs.
    GroundTruth,
    /// The detector's matched predictions, detached.
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub grad_clip: f64,
    pub schedule: Schedule,
    pub prompt_source: PromptSource,

    pub class_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    pub dice_weight: f64,
    pub no_object_weight: f64,
    pub cost_class: f64,
    pub cost_l1: f64,
    pub cost_giou: f64,

    pub backbone: BackboneKind,
    pub patch_size: usize,
    pub window_size: usize,
    pub swin_dim: usize,
    pub swin_depths: Vec<usize>,
    pub swin_heads: Vec<usize>,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_queries: usize,
    pub mask_dim: usize,
    pub mask_layers: usize,
    pub mask_heads: usize,
    pub mask_mlp_dim: usize,

    pub image_size: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub score_threshold: f64,

    /// Layout root; empty selects the synthetic shapes set.
    pub data_root: String,
    pub train_sequences: Vec<u32>,
    pub test_sequences: Vec<u32>,
    pub synthetic_seed: u64,
    pub synthetic_images: usize,
    pub synthetic_classes: usize,

    pub log_every: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    /// Stop early once the training-split evaluation reaches both targets.
    pub stop_map50: Option<f64>,
    pub stop_dice: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let det = DetectorConfig::default();
        let seg = SegmenterConfig::default();
        let norm = Normalization::default();
        let lw = LossWeights::default();
        let cw = CostWeights::default();
        Self {
            seed: 0,
            lr: 1e-4,
            weight_decay: 0.1,
            batch_size: 2,
            steps: 2000,
            grad_clip: 0.1,
            schedule: Schedule::Constant,
            prompt_source: PromptSource::GroundTruth,
            class_weight: lw.class,
            l1_weight: lw.l1,
            giou_weight: lw.giou,
            dice_weight: lw.dice,
            no_object_weight: lw.no_object,
            cost_class: cw.class,
            cost_l1: cw.l1,
            cost_giou: cw.giou,
            backbone: det.backbone,
            patch_size: det.swin.patch_size,
            window_size: det.swin.window_size,
            swin_dim: det.swin.embed_dim,
            swin_depths: det.swin.depths.clone(),
            swin_heads: det.swin.heads.clone(),
            d_model: det.d_model,
            encoder_layers: det.encoder_layers,
            decoder_layers: det.decoder_layers,
            heads: det.heads,
            ffn_dim: det.ffn_dim,
            num_queries: det.num_queries,
            mask_dim: seg.embed_dim,
            mask_layers: seg.decoder_layers,
            mask_heads: seg.heads,
            mask_mlp_dim: seg.mlp_dim,
            image_size: 128,
            mean: norm.mean,
            std: norm.std,
            score_threshold: 0.5,
            data_root: String::new(),
            train_sequences: vec![1, 2, 3, 4, 5, 6, 7],
            test_sequences: vec![8, 9],
            synthetic_seed: 7,
            synthetic_images: 8,
            synthetic_classes: 2,
            log_every: 10,
            eval_every: 0,
            checkpoint_every: 0,
            stop_map50: None,
            stop_dice: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Applies `key=value` pairs; values are parsed as TOML, falling back to a
    /// bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            table.insert(k.to_string(), value);
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.steps == 0 {
            return bad("steps must be > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0".into());
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return bad(format!("score_threshold must be in [0, 1], got {}", self.score_threshold));
        }
        if self.swin_depths.len() != self.swin_heads.len() || self.swin_depths.is_empty() {
            return bad("swin_depths and swin_heads must be nonempty and of equal length".into());
        }
        if self.image_size == 0 {
            return bad("image_size must be > 0".into());
        }
        self.loss_weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.cost_weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            class: self.class_weight,
            l1: self.l1_weight,
            giou: self.giou_weight,
            dice: self.dice_weight,
            no_object: self.no_object_weight,
        }
    }

    pub fn cost_weights(&self) -> CostWeights {
        CostWeights {
            class: self.cost_class,
            l1: self.cost_l1,
            giou: self.cost_giou,
        }
    }

    pub fn detector_config(&self, num_classes: usize) -> DetectorConfig {
        DetectorConfig {
            backbone: self.backbone,
            swin: SwinConfig {
                patch_size: self.patch_size,
                window_size: self.window_size,
                embed_dim: self.swin_dim,
                depths: self.swin_depths.clone(),
                heads: self.swin_heads.clone(),
                ..SwinConfig::default()
            },
            d_model: self.d_model,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            num_queries: self.num_queries,
            num_classes,
        }
    }

    pub fn segmenter_config(&self) -> SegmenterConfig {
        SegmenterConfig {
            embed_dim: self.mask_dim,
            decoder_layers: self.mask_layers,
            heads: self.mask_heads,
            mlp_dim: self.mask_mlp_dim,
        }
    }

    pub fn normalization(&self) -> Normalization {
        Normalization {
            mean: self.mean,
            std: self.std,
        }
    }

    pub fn train_split(&self) -> SplitSpec {
        SplitSpec::sequences("train", &self.train_sequences)
    }

    pub fn test_split(&self) -> SplitSpec {
        SplitSpec::sequences("test", &self.test_sequences)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_exact() {
        let cfg = RunConfig {
            lr: 3.5e-4,
            stop_dice: Some(0.85),
            data_root: "/data/x".into(),
            ..Default::default()
        };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("lr = 0.1\nbogus = 3\n").is_err());
        assert!(RunConfig::default().with_overrides(&["nope=1"]).is_err());
    }

    #[test]
    fn overrides_parse_types() {
        let cfg = RunConfig::default()
            .with_overrides(&["lr=0.001", "backbone=cnn", "train_sequences=[1, 3]", "stop_map50=0.9"])
            .unwrap();
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.backbone, BackboneKind::Cnn);
        assert_eq!(cfg.train_sequences, vec![1, 3]);
        assert_eq!(cfg.stop_map50, Some(0.9));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::default().with_overrides(&["lr=0"]).is_err());
        assert!(RunConfig::default().with_overrides(&["steps=0"]).is_err());
        assert!(RunConfig::default().with_overrides(&["lr"]).is_err());
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = RunConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.batch_size, c.grad_clip), (1e-4, 0.1, 2, 0.1));
        assert_eq!(c.num_queries, 20);
        assert_eq!(c.schedule, Schedule::Constant);
    }
}
