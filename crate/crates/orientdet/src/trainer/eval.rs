//! Evaluation: pseudo-label mIoU, rotated NMS, and all-points mAP at
//! rotated IoU 0.5.

use crate::geom::{rotated_iou, OrientedBox};

/// Mean rotated IoU between paired pseudo and ground-truth boxes.
/// Pairing is positional (pseudo label i belongs to GT instance i); a
/// count mismatch pads the shorter side with IoU 0 and bumps the returned
/// warning count.
pub fn evaluate_miou(
    pseudo: &[Vec<OrientedBox>],
    gt: &[Vec<OrientedBox>],
) -> (f64, usize) {
    assert_eq!(pseudo.len(), gt.len(), "image count mismatch");
    let mut total = 0.0;
    let mut count = 0usize;
    let mut warnings = 0usize;
    for (ps, gs) in pseudo.iter().zip(gt) {
        let n = ps.len().max(gs.len());
        if ps.len() != gs.len() {
            warnings += n - ps.len().min(gs.len());
        }
        for i in 0..n {
            if let (Some(p), Some(g)) = (ps.get(i), gs.get(i)) {
                total += rotated_iou(p, g);
            }
            count += 1;
        }
    }
    if count == 0 {
        return (0.0, warnings);
    }
    (total / count as f64, warnings)
}

/// A scored, classed detection.
#[derive(Debug, Clone)]
pub struct Detection {
    pub bbox: OrientedBox,
    pub score: f64,
    pub class: usize,
}

/// Greedy rotated NMS within one class: keep by descending score, drop
/// boxes with IoU above `iou_thr` against a kept box.
pub fn rotated_nms(dets: &mut Vec<Detection>, iou_thr: f64) {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut kept: Vec<Detection> = Vec::new();
    'outer: for d in dets.drain(..) {
        for k in &kept {
            if d.class == k.class && rotated_iou(&d.bbox, &k.bbox) > iou_thr {
                continue 'outer;
            }
        }
        kept.push(d);
    }
    *dets = kept;
}

/// All-points average precision for one class given per-image detections
/// and ground truths. Matching is greedy by descending score at rotated
/// IoU >= 0.5; each GT matches at most once.
fn average_precision(
    dets: &[(usize, &Detection)],
    gts: &[(usize, &OrientedBox)],
) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|a, b| dets[*b].1.score.partial_cmp(&dets[*a].1.score).unwrap());
    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for &di in &order {
        let (img, det) = dets[di];
        let mut best = -1.0f64;
        let mut best_g = usize::MAX;
        for (gi, (gimg, gb)) in gts.iter().enumerate() {
            if *gimg != img || matched[gi] {
                continue;
            }
            let iou = rotated_iou(&det.bbox, gb);
            if iou >= 0.5 && iou > best {
                best = iou;
                best_g = gi;
            }
        }
        if best_g != usize::MAX {
            matched[best_g] = true;
            tp.push(true);
        } else {
            tp.push(false);
        }
    }
    // All-points AP: integrate precision over recall steps.
    let total_gt = gts.len() as f64;
    let mut ap = 0.0;
    let mut tp_count = 0usize;
    // precision envelope: walk detections in rank order, add area at each TP.
    let mut precisions: Vec<f64> = Vec::with_capacity(tp.len());
    let mut recalls: Vec<f64> = Vec::with_capacity(tp.len());
    for (rank, is_tp) in tp.iter().enumerate() {
        if *is_tp {
            tp_count += 1;
        }
        precisions.push(tp_count as f64 / (rank + 1) as f64);
        recalls.push(tp_count as f64 / total_gt);
    }
    // Monotone precision envelope from the right.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut prev_recall = 0.0;
    for i in 0..precisions.len() {
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * precisions[i];
            prev_recall = recalls[i];
        }
    }
    ap
}

/// Mean AP at rotated IoU 0.5 over the classes present in the ground
/// truth.
pub fn evaluate_map50(
    detections: &[Vec<Detection>],
    gt: &[Vec<(OrientedBox, usize)>],
) -> f64 {
    assert_eq!(detections.len(), gt.len(), "image count mismatch");
    let classes: std::collections::BTreeSet<usize> =
        gt.iter().flatten().map(|(_, c)| *c).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for class in &classes {
        let dets: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().filter(|d| d.class == *class).map(move |d| (i, d)))
            .collect();
        let gts: Vec<(usize, &OrientedBox)> = gt
            .iter()
            .enumerate()
            .flat_map(|(i, gs)| {
                gs.iter().filter(|(_, c)| c == class).map(move |(b, _)| (i, b))
            })
            .collect();
        sum += average_precision(&dets, &gts);
    }
    sum / classes.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn bx(cx: f64, cy: f64, w: f64, h: f64, t: f64) -> OrientedBox {
        OrientedBox::new(cx, cy, w, h, t).unwrap()
    }

    #[test]
    fn miou_examples() {
        let a = bx(10.0, 10.0, 8.0, 4.0, 0.3);
        // Identical -> 1.0.
        let (m, w) = evaluate_miou(&[vec![a]], &[vec![a]]);
        assert!((m - 1.0).abs() < 1e-9 && w == 0);
        // Disjoint -> 0.0.
        let far = bx(100.0, 100.0, 8.0, 4.0, 0.0);
        let (m2, _) = evaluate_miou(&[vec![a]], &[vec![far]]);
        assert_eq!(m2, 0.0);
        // Two instances {1.0, 45-degree square overlap} -> 0.8536.
        let sq = bx(0.0, 0.0, 10.0, 10.0, 0.0);
        let sq45 = bx(0.0, 0.0, 10.0, 10.0, FRAC_PI_4);
        let (m3, _) = evaluate_miou(&[vec![a, sq]], &[vec![a, sq45]]);
        assert!((m3 - 0.8536).abs() < 1e-3, "got {m3}");
        // Unpaired instance counts as zero with a warning.
        let (m4, w4) = evaluate_miou(&[vec![a]], &[vec![a, far]]);
        assert!((m4 - 0.5).abs() < 1e-9);
        assert_eq!(w4, 1);
    }

    #[test]
    fn nms_keeps_best_per_cluster() {
        let mut dets = vec![
            Detection { bbox: bx(10.0, 10.0, 8.0, 4.0, 0.0), score: 0.5, class: 0 },
            Detection { bbox: bx(10.5, 10.0, 8.0, 4.0, 0.0), score: 0.9, class: 0 },
            Detection { bbox: bx(40.0, 40.0, 8.0, 4.0, 0.0), score: 0.3, class: 0 },
            // Same place, different class: survives.
            Detection { bbox: bx(10.0, 10.0, 8.0, 4.0, 0.0), score: 0.2, class: 1 },
        ];
        rotated_nms(&mut dets, 0.5);
        assert_eq!(dets.len(), 3);
        assert_eq!(dets[0].score, 0.9);
    }

    #[test]
    fn map_examples() {
        let g = bx(10.0, 10.0, 8.0, 4.0, 0.2);
        let gt = vec![vec![(g, 0)]];
        // Exact detection -> 1.0.
        let d = vec![vec![Detection { bbox: g, score: 1.0, class: 0 }]];
        assert!((evaluate_map50(&d, &gt) - 1.0).abs() < 1e-9);
        // No detections -> 0.0.
        assert_eq!(evaluate_map50(&[vec![]], &gt), 0.0);
        // TP at rank 1 plus an FP at rank 2 -> AP 1.0; swapped -> 0.5.
        let fp = bx(50.0, 50.0, 8.0, 4.0, 0.0);
        let d2 = vec![vec![
            Detection { bbox: g, score: 0.9, class: 0 },
            Detection { bbox: fp, score: 0.8, class: 0 },
        ]];
        assert!((evaluate_map50(&d2, &gt) - 1.0).abs() < 1e-9);
        let d3 = vec![vec![
            Detection { bbox: g, score: 0.8, class: 0 },
            Detection { bbox: fp, score: 0.9, class: 0 },
        ]];
        assert!((evaluate_map50(&d3, &gt) - 0.5).abs() < 1e-9);
    }
}
