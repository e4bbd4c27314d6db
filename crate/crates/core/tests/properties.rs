use proptest::prelude::*;

use detseg::geometry::{cxcywh_to_xyxy, giou_xyxy, iou_xyxy, xyxy_to_cxcywh, PairwiseMatrix};
use detseg::mask::BinaryMask;
use detseg::matching::hungarian;
use detseg::metrics::{average_precision, frame_class_scores, DetectionRecord, GroundTruthBox};

fn corner_box() -> impl Strategy<Value = [f64; 4]> {
    (0.0..60.0f64, 0.0..60.0f64, 0.5..40.0f64, 0.5..40.0f64).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

fn cost_matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..6).prop_flat_map(|(n, m)| (Just(n), Just(m), prop::collection::vec(-10.0..10.0f64, n * m)))
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in corner_box(), b in corner_box()) {
        let (ab, ba) = (iou_xyxy(a, b), iou_xyxy(b, a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou_xyxy(a, a) - 1.0).abs() < 1e-12);
        let g = giou_xyxy(a, b);
        prop_assert!((g - giou_xyxy(b, a)).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&g) && g <= ab + 1e-12);
    }

    #[test]
    fn iou_ignores_common_shift(a in corner_box(), b in corner_box(), dx in -20i32..20, dy in -20i32..20) {
        let s = |c: [f64; 4]| [c[0] + dx as f64, c[1] + dy as f64, c[2] + dx as f64, c[3] + dy as f64];
        prop_assert!((iou_xyxy(s(a), s(b)) - iou_xyxy(a, b)).abs() < 1e-9);
        prop_assert!((giou_xyxy(s(a), s(b)) - giou_xyxy(a, b)).abs() < 1e-9);
    }

    #[test]
    fn center_form_round_trips(a in corner_box()) {
        let back = cxcywh_to_xyxy(xyxy_to_cxcywh(a));
        for k in 0..4 {
            prop_assert!((back[k] - a[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn matching_follows_row_permutation((n, m, v) in cost_matrix(), seed in any::<u64>()) {
        let cost = PairwiseMatrix::new(n, m, v.clone()).unwrap();
        let base = hungarian(&cost).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        // row i of the permuted matrix is row perm[i] of the original
        let pv: Vec<f64> = perm.iter().flat_map(|&r| v[r * m..(r + 1) * m].to_vec()).collect();
        let pc = PairwiseMatrix::new(n, m, pv).unwrap();
        let pa = hungarian(&pc).unwrap();
        prop_assert!((pa.total_cost(&pc) - base.total_cost(&cost)).abs() < 1e-9);
        prop_assert_eq!(pa.pairs.len(), n.min(m));
        let mut cols: Vec<usize> = pa.pairs.iter().map(|p| p.1).collect();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(cols.len(), pa.pairs.len());
    }

    #[test]
    fn row_offset_keeps_square_assignment((n, v) in (1usize..6).prop_flat_map(|n| (Just(n), prop::collection::vec(-10.0..10.0f64, n * n))), row in 0usize..6, shift in -5.0..5.0f64) {
        let row = row % n;
        let cost = PairwiseMatrix::new(n, n, v.clone()).unwrap();
        let mut shifted = v;
        for x in &mut shifted[row * n..(row + 1) * n] {
            *x += shift;
        }
        let sc = PairwiseMatrix::new(n, n, shifted).unwrap();
        let (a, b) = (hungarian(&cost).unwrap(), hungarian(&sc).unwrap());
        prop_assert!((b.total_cost(&sc) - a.total_cost(&cost) - shift).abs() < 1e-9);
    }

    #[test]
    fn lowest_ranked_false_positive_never_raises_ap(
        gts in prop::collection::vec(corner_box(), 1..5),
        preds in prop::collection::vec((corner_box(), 0.01..0.99f64), 0..8),
        t in 0usize..10,
    ) {
        let threshold = 0.5 + 0.05 * t as f64;
        let g: Vec<GroundTruthBox> = gts.iter().map(|&bbox| GroundTruthBox { image_id: 0, class_id: 1, bbox }).collect();
        let mut p: Vec<DetectionRecord> = preds.iter().map(|&(bbox, confidence)| DetectionRecord { image_id: 0, class_id: 1, confidence, bbox }).collect();
        let before = average_precision(&p, &g, 1, threshold).unwrap();
        prop_assert!((0.0..=1.0).contains(&before));
        p.push(DetectionRecord { image_id: 0, class_id: 1, confidence: 0.001, bbox: [200.0, 200.0, 210.0, 210.0] });
        prop_assert!(average_precision(&p, &g, 1, threshold).unwrap() <= before + 1e-12);
    }

    #[test]
    fn exact_detections_give_full_ap(gts in prop::collection::vec(corner_box(), 1..5), t in 0usize..10) {
        let threshold = 0.5 + 0.05 * t as f64;
        let g: Vec<GroundTruthBox> = gts.iter().map(|&bbox| GroundTruthBox { image_id: 3, class_id: 2, bbox }).collect();
        let p: Vec<DetectionRecord> = gts.iter().map(|&bbox| DetectionRecord { image_id: 3, class_id: 2, confidence: 0.9, bbox }).collect();
        prop_assert!((average_precision(&p, &g, 2, threshold).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dice_follows_from_iou(a in prop::collection::vec(any::<bool>(), 64), b in prop::collection::vec(any::<bool>(), 64)) {
        let pm = BinaryMask::from_vec(8, 8, a).unwrap();
        let gm = BinaryMask::from_vec(8, 8, b).unwrap();
        for c in frame_class_scores(&[(1, pm)], &[(1, gm)]).unwrap() {
            prop_assert!((c.dice - 2.0 * c.iou / (1.0 + c.iou)).abs() < 1e-12);
        }
    }
}
