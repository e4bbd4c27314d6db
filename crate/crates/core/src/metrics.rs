//! Detection mAP over COCO IoU thresholds and per-frame segmentation mIoU/Dice.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::iou_xyxy;
use crate::mask::BinaryMask;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub class_id: u32,
    pub confidence: f64,
    /// Corner-form box; all records of one evaluation share a frame.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: u64,
    pub class_id: u32,
    pub bbox: [f64; 4],
}

/// 101-point interpolated AP for one class. `None` when the class has no
/// ground truth, so it drops out of the mean.
pub fn average_precision(
    preds: &[DetectionRecord],
    gts: &[GroundTruthBox],
    class_id: u32,
    iou_threshold: f64,
) -> Option<f64> {
    let mut gt_by_image: BTreeMap<u64, Vec<[f64; 4]>> = BTreeMap::new();
    for g in gts.iter().filter(|g| g.class_id == class_id) {
        gt_by_image.entry(g.image_id).or_default().push(g.bbox);
    }
    let n_gt: usize = gt_by_image.values().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..preds.len())
        .filter(|&i| preds[i].class_id == class_id)
        .collect();
    order.sort_by(|&a, &b| rank(&preds[a], &preds[b]).then(a.cmp(&b)));

    let mut taken: BTreeMap<u64, Vec<bool>> = gt_by_image
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for i in order {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(boxes) = gt_by_image.get(&p.image_id) {
            let used = &taken[&p.image_id];
            for (j, g) in boxes.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let iou = iou_xyxy(p.bbox, *g);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
        }
        match best {
            Some((j, _)) => {
                taken.get_mut(&p.image_id).expect("image has gt")[j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    Some(interpolated_ap(&precision, &recall))
}

// Descending confidence, then image id for a shard-independent order.
fn rank(a: &DetectionRecord, b: &DetectionRecord) -> Ordering {
    b.confidence
        .partial_cmp(&a.confidence)
        .unwrap_or(Ordering::Equal)
        .then(a.image_id.cmp(&b.image_id))
}

/// Area under the monotone precision envelope sampled at 101 recall points.
pub fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0usize;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        while k < recall.len() && recall[k] < r {
            k += 1;
        }
        if k < recall.len() {
            sum += envelope[k];
        }
    }
    sum / 101.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap_50_95: f64,
    pub ap_50: f64,
    pub ap_75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub map_50_95: f64,
    pub map_50: f64,
    pub map_75: f64,
    pub per_class: BTreeMap<u32, ClassAp>,
}

/// Mean AP over classes with ground truth. `None` when no ground truth exists.
pub fn map_range(preds: &[DetectionRecord], gts: &[GroundTruthBox]) -> Option<MapSummary> {
    let classes: BTreeSet<u32> = gts.iter().map(|g| g.class_id).collect();
    if classes.is_empty() {
        return None;
    }
    let thresholds = coco_thresholds();
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&t| average_precision(preds, gts, c, t).expect("class has gt"))
            .collect();
        per_class.insert(
            c,
            ClassAp {
                ap_50_95: aps.iter().sum::<f64>() / aps.len() as f64,
                ap_50: aps[0],
                ap_75: aps[5],
            },
        );
    }
    let n = per_class.len() as f64;
    let mean = |f: fn(&ClassAp) -> f64| per_class.values().map(f).sum::<f64>() / n;
    Some(MapSummary {
        map_50_95: mean(|c| c.ap_50_95),
        map_50: mean(|c| c.ap_50),
        map_75: mean(|c| c.ap_75),
        per_class,
    })
}

/// Class-labelled binary masks of one frame.
pub type FrameMasks = Vec<(u32, BinaryMask)>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_id: u32,
    pub iou: f64,
    pub dice: f64,
}

/// IoU and Dice per class present in the frame's ground truth, with each
/// side's masks merged per class.
pub fn frame_class_scores(pred: &[(u32, BinaryMask)], gt: &[(u32, BinaryMask)]) -> Result<Vec<ClassScore>> {
    let Some((_, first)) = gt.first() else {
        return Ok(Vec::new());
    };
    for (_, m) in pred.iter().chain(gt) {
        ensure!(m.same_shape(first), "masks of one frame differ in shape");
    }
    let classes: BTreeSet<u32> = gt.iter().map(|(c, _)| *c).collect();
    let merge = |set: &[(u32, BinaryMask)], class: u32| {
        let mut out = BinaryMask::new(first.width(), first.height());
        for (_, m) in set.iter().filter(|(c, _)| *c == class) {
            out.union_with(m).expect("shapes checked");
        }
        out
    };
    Ok(classes
        .into_iter()
        .map(|c| {
            let p = merge(pred, c);
            let g = merge(gt, c);
            let inter = p.intersection_area(&g) as f64;
            let (pa, ga) = (p.area() as f64, g.area() as f64);
            let union = pa + ga - inter;
            let iou = if union > 0.0 { inter / union } else { 0.0 };
            let dice = if pa + ga > 0.0 { 2.0 * inter / (pa + ga) } else { 0.0 };
            ClassScore {
                class_id: c,
                iou,
                dice,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub miou: f64,
    pub dice: f64,
}

/// Per-frame mean over present classes, then mean over frames. Frames with
/// empty ground truth are skipped.
pub fn segmentation_scores(pred: &[FrameMasks], gt: &[FrameMasks]) -> Result<Option<SegmentationSummary>> {
    ensure!(
        pred.len() == gt.len(),
        "{} predicted frames for {} ground-truth frames",
        pred.len(),
        gt.len()
    );
    let mut acc = SegmentationAccumulator::default();
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        acc.add_frame(i as u64, p, g)?;
    }
    Ok(acc.summary())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentationAccumulator {
    frames: BTreeMap<u64, Vec<ClassScore>>,
}

impl SegmentationAccumulator {
    pub fn add_frame(&mut self, image_id: u64, pred: &[(u32, BinaryMask)], gt: &[(u32, BinaryMask)]) -> Result<()> {
        let scores = frame_class_scores(pred, gt)?;
        if !scores.is_empty() {
            self.frames.insert(image_id, scores);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: SegmentationAccumulator) {
        self.frames.extend(other.frames);
    }

    pub fn class_scores(&self) -> impl Iterator<Item = &ClassScore> {
        self.frames.values().flatten()
    }

    pub fn summary(&self) -> Option<SegmentationSummary> {
        if self.frames.is_empty() {
            return None;
        }
        let (mut iou, mut dice) = (0.0, 0.0);
        for scores in self.frames.values() {
            let n = scores.len() as f64;
            iou += scores.iter().map(|s| s.iou).sum::<f64>() / n;
            dice += scores.iter().map(|s| s.dice).sum::<f64>() / n;
        }
        let f = self.frames.len() as f64;
        Some(SegmentationSummary {
            miou: iou / f,
            dice: dice / f,
        })
    }

    /// Mean IoU per class over the frames where it is present.
    pub fn per_class_iou(&self) -> BTreeMap<u32, f64> {
        let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for s in self.class_scores() {
            let e = sums.entry(s.class_id).or_default();
            e.0 += s.iou;
            e.1 += 1;
        }
        sums.into_iter()
            .map(|(c, (s, n))| (c, s / n as f64))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionAccumulator {
    preds: Vec<DetectionRecord>,
    gts: Vec<GroundTruthBox>,
}

impl DetectionAccumulator {
    pub fn add_image(&mut self, preds: impl IntoIterator<Item = DetectionRecord>, gts: impl IntoIterator<Item = GroundTruthBox>) {
        self.preds.extend(preds);
        self.gts.extend(gts);
    }

    /// Shards must cover disjoint image ids.
    pub fn merge(&mut self, other: DetectionAccumulator) {
        self.preds.extend(other.preds);
        self.gts.extend(other.gts);
        self.canonicalize();
    }

    fn canonicalize(&mut self) {
        self.preds.sort_by_key(|p| p.image_id);
        self.gts.sort_by_key(|g| g.image_id);
    }

    pub fn summary(&self) -> Option<MapSummary> {
        let mut sorted = self.clone();
        sorted.canonicalize();
        map_range(&sorted.preds, &sorted.gts)
    }
}

/// Combined detection and segmentation report; every score lies in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map_50_95: Option<f64>,
    pub map_50: Option<f64>,
    pub map_75: Option<f64>,
    pub per_class_ap: BTreeMap<u32, ClassAp>,
    pub miou: Option<f64>,
    pub dice: Option<f64>,
    pub per_class_iou: BTreeMap<u32, f64>,
}

impl MetricReport {
    pub fn from_accumulators(det: &DetectionAccumulator, seg: &SegmentationAccumulator) -> Self {
        let map = det.summary();
        let s = seg.summary();
        Self {
            map_50_95: map.as_ref().map(|m| m.map_50_95),
            map_50: map.as_ref().map(|m| m.map_50),
            map_75: map.as_ref().map(|m| m.map_75),
            per_class_ap: map.map(|m| m.per_class).unwrap_or_default(),
            miou: s.map(|s| s.miou),
            dice: s.map(|s| s.dice),
            per_class_iou: seg.per_class_iou(),
        }
    }

    /// Flat `(name, value)` pairs for the headline scores.
    pub fn headline(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("map_50_95", self.map_50_95),
            ("map_50", self.map_50),
            ("map_75", self.map_75),
            ("miou", self.miou),
            ("dice", self.dice),
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Headline table scaled by 100, one row per metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.headline() {
            let _ = writeln!(out, "{k},{}", percent_cell(v));
        }
        out
    }

    /// Per-class table scaled by 100.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class_id,ap_50_95,ap_50,ap_75,iou\n");
        let classes: BTreeSet<u32> = self
            .per_class_ap
            .keys()
            .chain(self.per_class_iou.keys())
            .copied()
            .collect();
        for c in classes {
            let ap = self.per_class_ap.get(&c);
            let _ = writeln!(
                out,
                "{c},{},{},{},{}",
                percent_cell(ap.map(|a| a.ap_50_95)),
                percent_cell(ap.map(|a| a.ap_50)),
                percent_cell(ap.map(|a| a.ap_75)),
                percent_cell(self.per_class_iou.get(&c).copied()),
            );
        }
        out
    }
}

/// Formats a [0, 1] score the way result tables print it: ×100, one decimal.
pub fn percent_cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.1}", v * 100.0),
        None => "-".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image_id: u64, class_id: u32, confidence: f64, bbox: [f64; 4]) -> DetectionRecord {
        DetectionRecord {
            image_id,
            class_id,
            confidence,
            bbox,
        }
    }

    fn gt(image_id: u64, class_id: u32, bbox: [f64; 4]) -> GroundTruthBox {
        GroundTruthBox {
            image_id,
            class_id,
            bbox,
        }
    }

    const B: [f64; 4] = [0.0, 0.0, 10.0, 10.0];

    #[test]
    fn perfect_detector() {
        let p = [det(0, 1, 0.9, B)];
        let g = [gt(0, 1, B)];
        for t in coco_thresholds() {
            assert_eq!(average_precision(&p, &g, 1, t), Some(1.0));
        }
        let m = map_range(&p, &g).unwrap();
        assert_eq!((m.map_50_95, m.map_50, m.map_75), (1.0, 1.0, 1.0));
    }

    #[test]
    fn iou_point_six() {
        // [0,0,10,10] vs [0,0,10,6]: IoU 60/100
        let p = [det(0, 1, 0.9, [0.0, 0.0, 10.0, 6.0])];
        let g = [gt(0, 1, B)];
        assert_eq!(average_precision(&p, &g, 1, 0.5), Some(1.0));
        assert_eq!(average_precision(&p, &g, 1, 0.75), Some(0.0));
    }

    #[test]
    fn duplicate_is_false_positive() {
        let p = [det(0, 1, 0.9, B), det(0, 1, 0.8, B)];
        let g = [gt(0, 1, B)];
        // PR points (P=1,R=1), (P=1/2,R=1): envelope is 1 at every recall level.
        assert_eq!(average_precision(&p, &g, 1, 0.5), Some(1.0));
        let p = [det(0, 1, 0.7, [20.0, 20.0, 30.0, 30.0]), det(0, 1, 0.8, B)];
        assert_eq!(average_precision(&p, &g, 1, 0.5), Some(1.0));
        let p = [det(0, 1, 0.9, [20.0, 20.0, 30.0, 30.0]), det(0, 1, 0.8, B)];
        assert_eq!(average_precision(&p, &g, 1, 0.5), Some(0.5));
    }

    #[test]
    fn thresholds_between_50_and_55() {
        // IoU 0.52
        let p = [det(0, 1, 0.9, [0.0, 0.0, 10.0, 5.2])];
        let g = [gt(0, 1, B)];
        let m = map_range(&p, &g).unwrap();
        assert_eq!(m.map_50, 1.0);
        assert!((m.map_50_95 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn no_predictions_and_no_gt() {
        let g = [gt(0, 1, B)];
        let m = map_range(&[], &g).unwrap();
        assert_eq!((m.map_50_95, m.map_50, m.map_75), (0.0, 0.0, 0.0));
        assert!(map_range(&[det(0, 1, 0.9, B)], &[]).is_none());
        assert_eq!(average_precision(&[det(0, 2, 0.9, B)], &g, 2, 0.5), None);
    }

    fn rect(x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(20, 20, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y))
    }

    #[test]
    fn segmentation_identity_and_half() {
        let g = vec![vec![(1, rect(2, 2, 12, 12))]];
        let s = segmentation_scores(&g, &g).unwrap().unwrap();
        assert_eq!((s.miou, s.dice), (1.0, 1.0));
        let p = vec![vec![(1, rect(2, 2, 7, 12))]];
        let s = segmentation_scores(&p, &g).unwrap().unwrap();
        assert_eq!(s.miou, 0.5);
        assert!((s.dice - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn missing_class_scores_zero_and_empty_frames_skip() {
        let g = vec![
            vec![(1, rect(2, 2, 12, 12)), (2, rect(14, 14, 18, 18))],
            vec![],
        ];
        let p = vec![vec![(1, rect(2, 2, 12, 12))], vec![(1, rect(0, 0, 3, 3))]];
        let s = segmentation_scores(&p, &g).unwrap().unwrap();
        assert_eq!(s.miou, 0.5);
        assert_eq!(s.dice, 0.5);
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(percent_cell(Some(0.824)), "82.4");
        assert_eq!(percent_cell(None), "-");
    }

    #[test]
    fn shard_merge_matches_sequential() {
        let mut all = DetectionAccumulator::default();
        let mut a = DetectionAccumulator::default();
        let mut b = DetectionAccumulator::default();
        for img in 0..6u64 {
            let o = img as f64;
            let preds = vec![
                det(img, 1, 0.5 + 0.05 * o, [o, 0.0, o + 5.0, 5.0]),
                det(img, 2, 0.6, [0.0, o, 4.0, o + 4.0]),
            ];
            let gts = vec![gt(img, 1, [o, 0.5, o + 5.0, 5.0]), gt(img, 2, [0.0, 0.0, 4.0, 4.0])];
            all.add_image(preds.clone(), gts.clone());
            if img % 2 == 0 {
                a.add_image(preds, gts);
            } else {
                b.add_image(preds, gts);
            }
        }
        b.merge(a);
        assert_eq!(b.summary(), all.summary());
    }
}
