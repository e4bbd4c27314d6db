//! Joint optimization of detector and segmenter, logging and evaluation.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{PromptSource, RunConfig, Schedule};
use crate::data::{collate, load_layout, synth_shapes, Batch, Dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::losses::{
    classification_targets, cross_entropy_targets, dice_loss, matched_box_losses, LossReport, LossTerms,
};
use crate::matching::{build_cost_matrix, hungarian, Assignment};
use crate::metrics::{DetectionAccumulator, DetectionRecord, GroundTruthBox, MetricReport, SegmentationAccumulator};
use crate::model::Model;
use crate::segmenter::BoxPrompts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
    pub grad_norm: f64,
    pub unix_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub unix_ms: u64,
    pub report: MetricReport,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Step(StepLog),
    Eval(EvalLog),
}

/// Parses a line-delimited log; errors name the offending line.
pub fn parse_log(text: &str) -> Result<Vec<LogEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: LogEntry =
            serde_json::from_str(line).map_err(|e| Error::Data(format!("log line {}: {e}", i + 1)))?;
        out.push(e);
    }
    if out.is_empty() {
        return Err(Error::Data("log is empty".into()));
    }
    Ok(out)
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Loss terms of one batch plus the matching that produced them.
pub struct BatchLosses {
    pub terms: LossTerms,
    pub assignments: Vec<Assignment>,
}

/// Forward pass, per-image matching, prompting and all four loss terms.
pub fn batch_losses(model: &Model, batch: &Batch, cfg: &RunConfig) -> Result<BatchLosses> {
    let (out, memory) = model.forward(batch)?;
    let (b, q, k) = out.class_logits.dims3()?;
    let cost_w = cfg.cost_weights();
    let dev = model.device();

    let mut class_targets = Vec::with_capacity(b * q);
    let mut pred_rows = Vec::new();
    let mut gt_flat: Vec<f32> = Vec::new();
    let mut gt_masks: Vec<f32> = Vec::new();
    let mut image_index = Vec::new();
    let mut assignments = Vec::with_capacity(b);
    let mut num_gt = 0;
    for (i, t) in batch.targets.iter().enumerate() {
        let probs = out.class_probs(i)?;
        let boxes = out.boxes_for(i)?;
        let cost = build_cost_matrix(&probs, &boxes, &t.labels, &t.boxes, &cost_w)?;
        let a = hungarian(&cost)?;
        class_targets.extend(classification_targets(q, k - 1, &a, &t.labels)?);
        for &(p, g) in &a.pairs {
            pred_rows.push((i * q + p) as u32);
            gt_flat.extend(t.boxes[g].coords().iter().map(|&v| v as f32));
            gt_masks.extend(t.masks[g].data().iter().map(|&m| m as u8 as f32));
            image_index.push(i);
        }
        num_gt += t.labels.len();
        assignments.push(a);
    }

    let logits = out.class_logits.reshape((b * q, k))?;
    let class = cross_entropy_targets(&logits, &class_targets, cfg.no_object_weight)?;

    let n = pred_rows.len();
    let rows = Tensor::new(pred_rows.as_slice(), dev)?;
    let pred_boxes = out.boxes.reshape((b * q, 4))?.index_select(&rows, 0)?;
    let gt_boxes = Tensor::from_vec(gt_flat, (n, 4), dev)?;
    let (l1, giou) = matched_box_losses(&pred_boxes, &gt_boxes, num_gt)?;

    let dice = if n == 0 {
        Tensor::zeros((), DType::F32, dev)?
    } else {
        let prompt_boxes = match cfg.prompt_source {
            PromptSource::GroundTruth => gt_boxes.clone(),
            PromptSource::Predicted => pred_boxes.detach(),
        };
        let prompts = BoxPrompts::from_tensor(prompt_boxes, image_index)?;
        let masks = model.segmenter().segment(&memory, &prompts)?;
        let (ch, cw) = (batch.canvas.height as usize, batch.canvas.width as usize);
        let probs = candle_nn::ops::sigmoid(&masks.resized(ch, cw)?)?;
        let target = Tensor::from_vec(gt_masks, (n, ch, cw), dev)?;
        dice_loss(&probs, &target)?
    };
    Ok(BatchLosses {
        terms: LossTerms { class, l1, giou, dice },
        assignments,
    })
}

/// Deterministic epoch-wise shuffling driven by the run seed.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A_0000),
            order: (0..n).collect(),
            cursor: n,
            batch_size: batch_size.min(n).max(1),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let b = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        b
    }
}

pub struct Trainer {
    model: Model,
    cfg: RunConfig,
    opt: AdamW,
    vars: Vec<(String, Var)>,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model) -> Result<Self> {
        let cfg = model.config().clone();
        let vars = model.store().trainable_vars();
        let opt = AdamW::new(
            vars.iter().map(|(_, v)| v.clone()).collect(),
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        )?;
        Ok(Self {
            model,
            cfg,
            opt,
            vars,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        match self.cfg.schedule {
            Schedule::Constant => self.cfg.lr,
            Schedule::Cosine => {
                let t = step as f64 / self.cfg.steps.max(1) as f64;
                self.cfg.lr * 0.5 * (1.0 + (PI * t.min(1.0)).cos())
            }
        }
    }

    pub fn collate(&self, samples: &[&SampleRecord]) -> Result<Batch> {
        collate(
            samples,
            self.cfg.image_size,
            self.model.size_multiple(),
            &self.cfg.normalization(),
            self.model.device(),
        )
    }

    /// One optimization step. Non-finite losses or gradients abort with
    /// `NonFiniteLoss`; when `dump_dir` is set a diagnostic file is written.
    pub fn train_step(&mut self, samples: &[&SampleRecord], dump_dir: Option<&Path>) -> Result<StepLog> {
        let batch = self.collate(samples)?;
        let losses = batch_losses(&self.model, &batch, &self.cfg)?;
        let weights = self.cfg.loss_weights();
        let report = losses.terms.report(&weights)?;
        let total = losses.terms.total(&weights)?;
        let mut grads = total.backward()?;

        let mut sq = 0f64;
        for (_, v) in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        let grad_norm = sq.sqrt();
        if !report.is_finite() || !grad_norm.is_finite() {
            let detail = format!("losses {report:?}, gradient norm {grad_norm}");
            if let Some(dir) = dump_dir {
                dump_nonfinite(dir, self.step, &batch, &report, grad_norm)?;
            }
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail,
            });
        }
        let clip = self.cfg.grad_clip;
        if clip > 0.0 && grad_norm > clip {
            let scale = clip / (grad_norm + 1e-6);
            for (_, v) in &self.vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
        let lr = self.learning_rate(self.step);
        self.opt.set_learning_rate(lr);
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            lr,
            loss: report,
            grad_norm,
            unix_ms: unix_ms(),
        })
    }
}

fn dump_nonfinite(dir: &Path, step: usize, batch: &Batch, report: &LossReport, grad_norm: f64) -> Result<()> {
    #[derive(Serialize)]
    struct Dump<'a> {
        step: usize,
        samples: Vec<&'a str>,
        instances: Vec<usize>,
        loss: &'a LossReport,
        // serde_json writes non-finite floats as null; the text keeps them visible
        loss_text: String,
        grad_norm: String,
    }
    let d = Dump {
        step,
        samples: batch.meta.iter().map(|m| m.name.as_str()).collect(),
        instances: batch.targets.iter().map(|t| t.labels.len()).collect(),
        loss: report,
        loss_text: format!("{report:?}"),
        grad_norm: grad_norm.to_string(),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("nonfinite_step{step}.json"));
    let text = serde_json::to_string_pretty(&d)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Train or test split named by the config: the layout under `data_root`, or
/// the synthetic set when `data_root` is empty (both splits are then the same
/// images).
pub fn dataset_for(cfg: &RunConfig, test: bool) -> Result<Dataset> {
    if cfg.data_root.is_empty() {
        return synth_shapes(cfg.synthetic_seed, cfg.synthetic_images, cfg.image_size, cfg.synthetic_classes);
    }
    let split = if test { cfg.test_split() } else { cfg.train_split() };
    load_layout(Path::new(&cfg.data_root), &split)?.load_all()
}

/// Full-pass inference over `dataset`; image ids are sample positions.
pub fn evaluate(model: &Model, dataset: &Dataset, threshold: f64, batch_size: usize) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let cfg = model.config();
    let mut det = DetectionAccumulator::default();
    let mut seg = SegmentationAccumulator::default();
    for (chunk_i, chunk) in dataset.samples.chunks(batch_size.max(1)).enumerate() {
        let refs: Vec<&SampleRecord> = chunk.iter().collect();
        let batch = collate(&refs, cfg.image_size, model.size_multiple(), &cfg.normalization(), model.device())?;
        let preds = model.predict(&batch, threshold)?;
        for (j, (sample, pred)) in chunk.iter().zip(preds).enumerate() {
            let image_id = (chunk_i * batch_size.max(1) + j) as u64;
            det.add_image(
                pred.detections.iter().map(|&(class_id, confidence, bbox)| DetectionRecord {
                    image_id,
                    class_id,
                    confidence,
                    bbox,
                }),
                sample.instances.iter().zip(&sample.boxes).map(|(inst, b)| GroundTruthBox {
                    image_id,
                    class_id: inst.class_id,
                    bbox: b.coords(),
                }),
            );
            let pm: Vec<_> = pred.instances.iter().map(|i| (i.class_id, i.mask.clone())).collect();
            let gm: Vec<_> = sample.instances.iter().map(|i| (i.class_id, i.mask.clone())).collect();
            seg.add_frame(image_id, &pm, &gm)?;
        }
    }
    Ok(MetricReport::from_accumulators(&det, &seg))
}

/// Loads a checkpoint (refusing other code versions) and evaluates it.
pub fn evaluate_checkpoint(path: &Path, dataset: &Dataset) -> Result<MetricReport> {
    let ck = Checkpoint::load(path)?;
    let model = ck.to_model(&candle_core::Device::Cpu)?;
    evaluate(&model, dataset, ck.config.score_threshold, ck.config.batch_size)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogEntry>,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub final_checkpoint: Option<PathBuf>,
}

/// Runs `cfg.steps` steps (or until the stop targets are met). With an output
/// directory, writes `train_log.jsonl` and checkpoints there.
pub fn train(model: Model, train_set: &Dataset, eval_set: Option<&Dataset>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let cfg = model.config().clone();
    let eval_set = eval_set.unwrap_or(train_set);
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut write_entry = |e: &LogEntry, log: &mut Vec<LogEntry>| -> Result<()> {
        if let Some((f, p)) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(e)?).map_err(|err| Error::io(p.as_path(), err))?;
        }
        log.push(e.clone());
        Ok(())
    };

    let mut trainer = Trainer::new(model)?;
    let mut sampler = BatchSampler::new(train_set.len(), cfg.batch_size, cfg.seed);
    let mut log = Vec::new();
    let mut stopped_early = false;
    let started = Instant::now();
    let wants_stop = cfg.stop_map50.is_some() || cfg.stop_dice.is_some();
    while trainer.step() < cfg.steps {
        let idx = sampler.next_batch();
        let samples: Vec<&SampleRecord> = idx.iter().map(|&i| &train_set.samples[i]).collect();
        let entry = trainer.train_step(&samples, out_dir)?;
        let step = entry.step;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1) {
            log::info!(
                "step {step} loss {:.4} (cls {:.3} l1 {:.3} giou {:.3} dice {:.3}) |g| {:.3} {:.1}s",
                entry.loss.total,
                entry.loss.class_loss,
                entry.loss.l1_loss,
                entry.loss.giou_loss,
                entry.loss.dice_loss,
                entry.grad_norm,
                started.elapsed().as_secs_f64()
            );
        }
        write_entry(&LogEntry::Step(entry), &mut log)?;

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            if let Some(dir) = out_dir {
                Checkpoint::from_model(trainer.model(), step as u64)?.save(&dir.join(format!("checkpoint_step{step}.bin")))?;
            }
        }
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let report = evaluate(trainer.model(), eval_set, cfg.score_threshold, cfg.batch_size)?;
            log::info!(
                "eval step {step}: mAP50 {:?} mAP50:95 {:?} dice {:?} mIoU {:?}",
                report.map_50,
                report.map_50_95,
                report.dice,
                report.miou
            );
            let met = wants_stop
                && cfg.stop_map50.is_none_or(|t| report.map_50.is_some_and(|v| v >= t))
                && cfg.stop_dice.is_none_or(|t| report.dice.is_some_and(|v| v >= t));
            write_entry(
                &LogEntry::Eval(EvalLog {
                    step,
                    unix_ms: unix_ms(),
                    report,
                }),
                &mut log,
            )?;
            if met {
                stopped_early = true;
                break;
            }
        }
    }
    let steps_run = trainer.step();
    let final_checkpoint = match out_dir {
        Some(dir) => {
            let p = dir.join("final.ckpt");
            Checkpoint::from_model(trainer.model(), steps_run as u64)?.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainOutcome {
        model: trainer.into_model(),
        log,
        steps_run,
        stopped_early,
        final_checkpoint,
    })
}
