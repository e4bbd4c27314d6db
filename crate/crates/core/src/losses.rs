//! Training objectives on autodiff tensors: classification cross-entropy,
//! box L1 and GIoU over matched pairs, and soft Dice on mask probabilities.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::matching::Assignment;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub dice: f64,
    /// Cross-entropy weight of queries supervised as no-object.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
            dice: 1.0,
            no_object: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("class", self.class),
            ("l1", self.l1),
            ("giou", self.giou),
            ("dice", self.dice),
            ("no_object", self.no_object),
        ] {
            ensure!(v.is_finite() && v >= 0.0, "loss weight {name} must be finite and >= 0, got {v}");
        }
        Ok(())
    }
}

pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub class_loss: f64,
    pub l1_loss: f64,
    pub giou_loss: f64,
    pub dice_loss: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.class_loss, self.l1_loss, self.giou_loss, self.dice_loss, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Weighted sum of scalar components.
pub fn total_loss(class: f64, l1: f64, giou: f64, dice: f64, w: &LossWeights) -> LossReport {
    LossReport {
        class_loss: class,
        l1_loss: l1,
        giou_loss: giou,
        dice_loss: dice,
        total: w.class * class + w.l1 * l1 + w.giou * giou + w.dice * dice,
    }
}

/// Scalar loss tensors still attached to the graph.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub class: Tensor,
    pub l1: Tensor,
    pub giou: Tensor,
    pub dice: Tensor,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        let t = ((&self.class * w.class)? + (&self.l1 * w.l1)?)?;
        let t = (t + (&self.giou * w.giou)?)?;
        Ok((t + (&self.dice * w.dice)?)?)
    }

    pub fn report(&self, w: &LossWeights) -> Result<LossReport> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(total_loss(s(&self.class)?, s(&self.l1)?, s(&self.giou)?, s(&self.dice)?, w))
    }
}

/// Per-query target index: GT class for matched queries, `num_classes`
/// (no-object) otherwise. `gt_labels` are 0-based.
pub fn classification_targets(
    num_queries: usize,
    num_classes: usize,
    assignment: &Assignment,
    gt_labels: &[usize],
) -> Result<Vec<usize>> {
    let mut t = vec![num_classes; num_queries];
    for &(p, g) in &assignment.pairs {
        ensure!(p < num_queries, "assignment refers to query {p} of {num_queries}");
        ensure!(g < gt_labels.len(), "assignment refers to target {g} of {}", gt_labels.len());
        let label = gt_labels[g];
        ensure!(label < num_classes, "label {label} out of range for {num_classes} classes");
        t[p] = label;
    }
    Ok(t)
}

fn log_softmax(x: &Tensor) -> candle_core::Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    shifted.broadcast_sub(&lse)
}

/// Weighted mean cross-entropy of `(N, C+1)` logits against targets in
/// `0..=C`; index `C` is no-object and carries `no_object_weight`.
pub fn cross_entropy_targets(logits: &Tensor, targets: &[usize], no_object_weight: f64) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    ensure!(k >= 2, "need at least one class plus no-object");
    ensure!(targets.len() == n, "{} targets for {n} rows", targets.len());
    let mut onehot = vec![0f64; n * k];
    let mut total_w = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        ensure!(t < k, "target {t} out of range for {k} logits");
        let w = if t == k - 1 { no_object_weight } else { 1.0 };
        onehot[i * k + t] = w;
        total_w += w;
    }
    if n == 0 || total_w == 0.0 {
        return Ok(Tensor::zeros((), logits.dtype(), logits.device())?);
    }
    let onehot = Tensor::from_vec(onehot, (n, k), logits.device())?.to_dtype(logits.dtype())?;
    let nll = (log_softmax(logits)? * onehot)?.sum_all()?.neg()?;
    Ok((nll / total_w)?)
}

/// Cross-entropy over all queries of one image.
pub fn classification_loss(
    logits: &Tensor,
    assignment: &Assignment,
    gt_labels: &[usize],
    no_object_weight: f64,
) -> Result<Tensor> {
    let (q, k) = logits.dims2()?;
    let targets = classification_targets(q, k - 1, assignment, gt_labels)?;
    cross_entropy_targets(logits, &targets, no_object_weight)
}

fn corners(b: &Tensor) -> candle_core::Result<(Tensor, Tensor, Tensor, Tensor)> {
    let c = b.narrow(1, 0, 2)?;
    let half = (b.narrow(1, 2, 2)? * 0.5)?;
    let lo = (&c - &half)?;
    let hi = (&c + &half)?;
    Ok((lo.narrow(1, 0, 1)?, lo.narrow(1, 1, 1)?, hi.narrow(1, 0, 1)?, hi.narrow(1, 1, 1)?))
}

/// Elementwise GIoU of `(N, 4)` normalized `(cx, cy, w, h)` boxes, `(N,)`.
pub fn giou_pairs(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ax1, ay1, ax2, ay2) = corners(a)?;
    let (bx1, by1, bx2, by2) = corners(b)?;
    let area_a = ((&ax2 - &ax1)? * (&ay2 - &ay1)?)?;
    let area_b = ((&bx2 - &bx1)? * (&by2 - &by1)?)?;
    let iw = (ax2.minimum(&bx2)? - ax1.maximum(&bx1)?)?.relu()?;
    let ih = (ay2.minimum(&by2)? - ay1.maximum(&by1)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((area_a + area_b)? - &inter)?;
    let iou = (&inter / union.maximum(1e-12)?)?;
    let hw = (ax2.maximum(&bx2)? - ax1.minimum(&bx1)?)?;
    let hh = (ay2.maximum(&by2)? - ay1.minimum(&by1)?)?;
    let hull = (hw * hh)?;
    let giou = (iou - ((&hull - &union)? / hull.maximum(1e-12)?)?)?;
    Ok(giou.squeeze(1)?)
}

/// L1 and GIoU losses over already matched `(N, 4)` box pairs, each summed
/// and divided by `max(1, num_boxes)`.
pub fn matched_box_losses(pred: &Tensor, gt: &Tensor, num_boxes: usize) -> Result<(Tensor, Tensor)> {
    ensure!(pred.dims() == gt.dims(), "box shapes differ: {:?} vs {:?}", pred.dims(), gt.dims());
    let (n, k) = pred.dims2()?;
    ensure!(k == 4, "boxes need 4 coordinates");
    let norm = num_boxes.max(1) as f64;
    if n == 0 {
        let z = Tensor::zeros((), pred.dtype(), pred.device())?;
        return Ok((z.clone(), z));
    }
    let l1 = ((pred - gt)?.abs()?.sum_all()? / norm)?;
    let giou = ((giou_pairs(pred, gt)?.neg()? + 1.0)?.sum_all()? / norm)?;
    Ok((l1, giou))
}

/// Gathers `assignment` pairs from `(Q, 4)` predictions and `(G, 4)` targets.
pub fn box_losses(pred_boxes: &Tensor, gt_boxes: &Tensor, assignment: &Assignment) -> Result<(Tensor, Tensor)> {
    let (p, g) = gather_pairs(pred_boxes, gt_boxes, assignment)?;
    matched_box_losses(&p, &g, assignment.pairs.len())
}

pub fn gather_pairs(pred: &Tensor, gt: &Tensor, assignment: &Assignment) -> Result<(Tensor, Tensor)> {
    let pi: Vec<u32> = assignment.pairs.iter().map(|&(p, _)| p as u32).collect();
    let gi: Vec<u32> = assignment.pairs.iter().map(|&(_, g)| g as u32).collect();
    let pi = Tensor::new(pi.as_slice(), pred.device())?;
    let gi = Tensor::new(gi.as_slice(), gt.device())?;
    Ok((pred.index_select(&pi, 0)?, gt.index_select(&gi, 0)?))
}

/// Mean over instances of `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`
/// for `(N, h, w)` (or `(h, w)`) probabilities and binary targets.
pub fn dice_loss(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    ensure!(
        probs.dims() == target.dims(),
        "mask shapes differ: {:?} vs {:?}",
        probs.dims(),
        target.dims()
    );
    let (probs, target) = if probs.rank() == 2 {
        (probs.unsqueeze(0)?, target.unsqueeze(0)?)
    } else {
        (probs.clone(), target.clone())
    };
    let n = probs.dim(0)?;
    if n == 0 {
        return Ok(Tensor::zeros((), probs.dtype(), probs.device())?);
    }
    let p = probs.flatten_from(1)?;
    let g = target.flatten_from(1)?.to_dtype(p.dtype())?;
    let inter = (&p * &g)?.sum(1)?;
    let num = ((inter * 2.0)? + DICE_EPS)?;
    let den = ((p.sum(1)? + g.sum(1)?)? + DICE_EPS)?;
    let per = ((num / den)?.neg()? + 1.0)?;
    Ok(per.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cxcywh_to_xyxy, giou_xyxy};
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn assign(pairs: &[(usize, usize)], unmatched: &[usize]) -> Assignment {
        Assignment {
            pairs: pairs.to_vec(),
            unmatched: unmatched.to_vec(),
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::zeros((5, 8), DType::F64, &Device::Cpu).unwrap();
        let l = classification_loss(&logits, &assign(&[(1, 0), (3, 1)], &[0, 2, 4]), &[2, 6], 0.1).unwrap();
        assert!((scalar(&l) - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero() {
        let mut v = vec![-50f64; 3 * 3];
        v[0] = 50.0; // query 0 -> class 0
        v[3 + 2] = 50.0; // query 1 -> no-object
        v[6 + 2] = 50.0;
        let logits = Tensor::from_vec(v, (3, 3), &Device::Cpu).unwrap();
        let l = classification_loss(&logits, &assign(&[(0, 0)], &[1, 2]), &[0], 0.1).unwrap();
        assert!(scalar(&l) < 1e-12);
    }

    #[test]
    fn empty_gt_targets_no_object() {
        let t = classification_targets(3, 2, &assign(&[], &[0, 1, 2]), &[]).unwrap();
        assert_eq!(t, vec![2, 2, 2]);
    }

    #[test]
    fn label_out_of_range_errors() {
        let logits = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(classification_loss(&logits, &assign(&[(0, 0)], &[1]), &[2], 0.1).is_err());
    }

    #[test]
    fn nested_box_example() {
        let p = Tensor::new(&[[0.5f64, 0.5, 0.5, 0.5]], &Device::Cpu).unwrap();
        let g = Tensor::new(&[[0.5f64, 0.5, 0.25, 0.25]], &Device::Cpu).unwrap();
        let (l1, giou) = box_losses(&p, &g, &assign(&[(0, 0)], &[])).unwrap();
        assert!((scalar(&l1) - 0.5).abs() < 1e-12);
        assert!((scalar(&giou) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty_boxes_give_zero() {
        let p = Tensor::new(&[[0.3f64, 0.4, 0.2, 0.1]], &Device::Cpu).unwrap();
        let (l1, giou) = box_losses(&p, &p, &assign(&[(0, 0)], &[])).unwrap();
        assert!(scalar(&l1).abs() < 1e-12 && scalar(&giou).abs() < 1e-12);
        let g = Tensor::zeros((0, 4), DType::F64, &Device::Cpu).unwrap();
        let (l1, giou) = box_losses(&p, &g, &assign(&[], &[0])).unwrap();
        assert_eq!((scalar(&l1), scalar(&giou)), (0.0, 0.0));
    }

    #[test]
    fn tensor_giou_matches_geometry() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut b = || {
                let w: f64 = rng.random_range(0.01..0.5);
                let h: f64 = rng.random_range(0.01..0.5);
                [rng.random_range(w / 2.0..1.0 - w / 2.0), rng.random_range(h / 2.0..1.0 - h / 2.0), w, h]
            };
            let (a, c) = (b(), b());
            let ta = Tensor::new(&[a], &Device::Cpu).unwrap();
            let tc = Tensor::new(&[c], &Device::Cpu).unwrap();
            let got = giou_pairs(&ta, &tc).unwrap().to_vec1::<f64>().unwrap()[0];
            let want = giou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(c));
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn dice_examples() {
        let dev = Device::Cpu;
        let g = Tensor::from_vec((0..400).map(|i| (i < 100) as u8 as f64).collect::<Vec<_>>(), (20, 20), &dev).unwrap();
        assert!(scalar(&dice_loss(&g, &g).unwrap()).abs() < 1e-12);
        let z = g.zeros_like().unwrap();
        assert!((scalar(&dice_loss(&z, &g).unwrap()) - (1.0 - 1.0 / 101.0)).abs() < 1e-12);
        assert!(scalar(&dice_loss(&z, &z).unwrap()).abs() < 1e-12);
        let bad = Tensor::zeros((20, 21), DType::F64, &dev).unwrap();
        assert!(dice_loss(&bad, &g).is_err());
    }

    #[test]
    fn weighted_total() {
        let r = total_loss(0.0, 0.5, 0.75, 0.2, &LossWeights::default());
        assert!((r.total - 4.2).abs() < 1e-12);
        let dice_only = LossWeights {
            class: 0.0,
            l1: 0.0,
            giou: 0.0,
            dice: 1.0,
            no_object: 0.1,
        };
        assert_eq!(total_loss(3.0, 2.0, 1.0, 0.4, &dice_only).total, 0.4);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &LossWeights::default()).total, 0.0);
    }

    #[test]
    fn terms_report_matches_tensor_total() {
        let dev = Device::Cpu;
        let s = |v: f64| Tensor::new(v, &dev).unwrap();
        let terms = LossTerms {
            class: s(0.3),
            l1: s(0.5),
            giou: s(0.75),
            dice: s(0.2),
        };
        let w = LossWeights::default();
        let r = terms.report(&w).unwrap();
        assert!((r.total - scalar(&terms.total(&w).unwrap())).abs() < 1e-12);
    }

    fn fd_check(f: impl Fn(&Tensor) -> Tensor, x0: Vec<f64>, shape: &[usize]) {
        let dev = Device::Cpu;
        let var = Var::from_vec(x0.clone(), shape, &dev).unwrap();
        let loss = f(var.as_tensor());
        let grads = loss.backward().unwrap();
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            let lp = scalar(&f(&Tensor::from_vec(xp, shape, &dev).unwrap()));
            let lm = scalar(&f(&Tensor::from_vec(xm, shape, &dev).unwrap()));
            let fd = (lp - lm) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-3, "coord {i}: analytic {} vs fd {fd}", g[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let dev = Device::Cpu;
        let boxes = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..3)
                .flat_map(|_| [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.1..0.4), rng.random_range(0.1..0.4)])
                .collect()
        };
        let gt = Tensor::from_vec(boxes(&mut rng), (3, 4), &dev).unwrap();
        let x0 = boxes(&mut rng);
        fd_check(|p| matched_box_losses(p, &gt, 3).unwrap().0, x0.clone(), &[3, 4]);
        fd_check(|p| matched_box_losses(p, &gt, 3).unwrap().1, x0, &[3, 4]);

        let target: Vec<f64> = (0..128).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
        let target = Tensor::from_vec(target, (2, 8, 8), &dev).unwrap();
        let p0: Vec<f64> = (0..128).map(|_| rng.random_range(0.05..0.95)).collect();
        fd_check(|p| dice_loss(p, &target).unwrap(), p0, &[2, 8, 8]);
    }
}
