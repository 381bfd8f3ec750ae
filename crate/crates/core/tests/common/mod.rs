//! Reference implementations used as oracles by the integration tests. They
//! share no code path with the library beyond its plain data types.

#![allow(dead_code)]

use densedet::eval::{DetectionRecord, EvalImage};
use densedet::geometry::BBox;
use densedet::ranking::ScoredBox;

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Exhaustive COCO-style AP: per (class, threshold) precision/recall curve,
/// right-to-left envelope computed by brute force, 101 recall samples.
/// Returns `(ap, per_threshold)`.
pub fn naive_coco_ap(dets: &[DetectionRecord], images: &[EvalImage], num_classes: usize, max_dets: usize) -> (f64, Vec<f64>) {
    // Per-image cap on the highest-scoring detections.
    let mut kept: Vec<DetectionRecord> = Vec::new();
    for img in images {
        let mut mine: Vec<DetectionRecord> = dets.iter().filter(|d| d.image_id == img.image_id).copied().collect();
        mine.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        mine.truncate(max_dets);
        kept.extend(mine);
    }

    let mut per_threshold = Vec::new();
    for t in 0..10 {
        let thr = (50 + 5 * t) as f64 / 100.0;
        let mut class_aps = Vec::new();
        for class in 0..num_classes {
            let mut scored: Vec<(f64, bool)> = Vec::new();
            let mut n_gt = 0;
            for img in images {
                let gts: Vec<&BBox> = img.gts.iter().filter(|g| g.class_id == class).map(|g| &g.bbox).collect();
                n_gt += gts.len();
                let mut ds: Vec<&DetectionRecord> =
                    kept.iter().filter(|d| d.image_id == img.image_id && d.class_id == class).collect();
                ds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                let mut used = vec![false; gts.len()];
                for d in ds {
                    let mut best: Option<usize> = None;
                    let mut best_iou = -1.0;
                    for (g, gb) in gts.iter().enumerate() {
                        let v = box_iou(&d.bbox, gb);
                        if !used[g] && v >= thr && v > best_iou {
                            best = Some(g);
                            best_iou = v;
                        }
                    }
                    if let Some(g) = best {
                        used[g] = true;
                    }
                    scored.push((d.score, best.is_some()));
                }
            }
            if n_gt == 0 {
                if !scored.is_empty() {
                    class_aps.push(0.0);
                }
                continue;
            }
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut prec = Vec::new();
            let mut rec = Vec::new();
            let mut tp = 0usize;
            for (i, &(_, hit)) in scored.iter().enumerate() {
                tp += hit as usize;
                prec.push(tp as f64 / (i + 1) as f64);
                rec.push(tp as f64 / n_gt as f64);
            }
            let mut sum = 0.0;
            for k in 0..=100 {
                // Same grid as numpy's linspace(0, 1, 101).
                let r = k as f64 * 0.01;
                if let Some(first) = rec.iter().position(|&x| x >= r) {
                    sum += prec[first..].iter().cloned().fold(0.0, f64::max);
                }
            }
            class_aps.push(sum / 101.0);
        }
        per_threshold.push(if class_aps.is_empty() {
            0.0
        } else {
            class_aps.iter().sum::<f64>() / class_aps.len() as f64
        });
    }
    let ap = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    (ap, per_threshold)
}

/// Textbook greedy NMS, O(n^2) per pick.
pub fn naive_nms(pool: &[ScoredBox], thr: f64) -> Vec<ScoredBox> {
    let mut left: Vec<ScoredBox> = pool.to_vec();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (a, b) = (&left[i], &left[best]);
            if a.score > b.score || (a.score == b.score && a.source_index < b.source_index) {
                best = i;
            }
        }
        let top = left.remove(best);
        left.retain(|c| box_iou(&top.bbox, &c.bbox) <= thr);
        out.push(top);
    }
    out
}
