//! Bipartite matching between query predictions and ground-truth instances.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::{giou_xyxy, BBox, BoxFormat, PairwiseMatrix};

/// Coefficients of the matching cost. Defaults follow the usual set-prediction
/// detector recipe: class 1, L1 5, GIoU 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.class, self.l1, self.giou];
        ensure!(
            w.iter().all(|v| v.is_finite() && *v >= 0.0),
            "cost weights must be finite and nonnegative: {w:?}"
        );
        ensure!(w.iter().any(|v| *v > 0.0), "all cost weights are zero");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Assignment {
    /// `(prediction, ground truth)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &PairwiseMatrix) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost.get(i, j)).sum()
    }

    pub fn gt_for_prediction(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == pred).map(|p| p.1)
    }

    pub fn prediction_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn gt_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

/// Matching cost between `Q` predictions and `G` ground truths.
///
/// `pred_class_probs` rows are softmax outputs over `C + 1` classes (the last
/// one is no-object, which never enters the cost). `gt_labels` are 0-based
/// class indices below `C`.
pub fn build_cost_matrix(
    pred_class_probs: &[Vec<f64>],
    pred_boxes: &[BBox],
    gt_labels: &[usize],
    gt_boxes: &[BBox],
    weights: &CostWeights,
) -> Result<PairwiseMatrix> {
    weights.validate()?;
    let q = pred_class_probs.len();
    ensure!(
        pred_boxes.len() == q,
        "{} box predictions for {q} class predictions",
        pred_boxes.len()
    );
    ensure!(
        gt_labels.len() == gt_boxes.len(),
        "{} labels for {} ground-truth boxes",
        gt_labels.len(),
        gt_boxes.len()
    );
    for (i, row) in pred_class_probs.iter().enumerate() {
        let s: f64 = row.iter().sum();
        ensure!(
            (s - 1.0).abs() <= 1e-5,
            "class probabilities of query {i} sum to {s}"
        );
        for &l in gt_labels {
            ensure!(
                l + 1 < row.len(),
                "label {l} out of range for {} logits",
                row.len()
            );
        }
    }
    for b in pred_boxes.iter().chain(gt_boxes) {
        ensure!(
            b.format() == BoxFormat::CxCyWhNorm,
            "matching expects normalized center-size boxes"
        );
    }
    let g = gt_boxes.len();
    let mut cost = PairwiseMatrix::zeros(q, g);
    for i in 0..q {
        let pc = pred_boxes[i].coords();
        let pxy = pred_boxes[i].corners();
        for j in 0..g {
            let gc = gt_boxes[j].coords();
            let l1: f64 = pc.iter().zip(gc.iter()).map(|(a, b)| (a - b).abs()).sum();
            let giou = giou_xyxy(pxy, gt_boxes[j].corners());
            let c = -weights.class * pred_class_probs[i][gt_labels[j]] + weights.l1 * l1
                - weights.giou * giou;
            cost.set(i, j, c);
        }
    }
    Ok(cost)
}

/// Minimum-cost assignment of `min(N, M)` pairs (shortest augmenting path
/// Hungarian method with row/column potentials).
pub fn hungarian(cost: &PairwiseMatrix) -> Result<Assignment> {
    ensure!(
        cost.values().iter().all(|v| v.is_finite()),
        "cost matrix contains non-finite entries"
    );
    let (n, m) = (cost.rows(), cost.cols());
    if n == 0 || m == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            unmatched: (0..n).collect(),
        });
    }
    let mut pairs = if n <= m {
        solve_rows_le_cols(cost)
    } else {
        solve_rows_le_cols(&cost.transpose())
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect()
    };
    pairs.sort_unstable();
    let mut matched = vec![false; n];
    for &(i, _) in &pairs {
        matched[i] = true;
    }
    let unmatched = (0..n).filter(|&i| !matched[i]).collect();
    Ok(Assignment { pairs, unmatched })
}

// Requires rows <= cols. Returns (row, col) pairs, one per row.
fn solve_rows_le_cols(cost: &PairwiseMatrix) -> Vec<(usize, usize)> {
    let (n, m) = (cost.rows(), cost.cols());
    // 1-based arrays; column 0 is a virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect()
}
