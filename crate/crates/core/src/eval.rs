//! COCO-style average precision over ten IoU thresholds with 101-point
//! interpolated precision.

use serde::{Deserialize, Serialize};

use crate::assigner::GtObject;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const NUM_IOU_THRESHOLDS: usize = 10;
pub const NUM_RECALL_POINTS: usize = 101;
pub const DEFAULT_MAX_DETS: usize = 100;

/// Size-bucket area bounds in squared image units.
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

/// `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> [f64; NUM_IOU_THRESHOLDS] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Recall sampling points `k * 0.01` for `k = 0..=100`.
pub fn recall_points() -> [f64; NUM_RECALL_POINTS] {
    std::array::from_fn(|k| k as f64 * 0.01)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Ground truth of one evaluated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalImage {
    pub image_id: u64,
    pub gts: Vec<GtObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// AP at each of the ten IoU thresholds.
    pub per_threshold: Vec<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub max_dets: usize,
    pub size_buckets: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_dets: DEFAULT_MAX_DETS,
            size_buckets: false,
        }
    }
}

/// A ground truth tagged with its image, for [`match_greedy`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtRecord {
    pub image_id: u64,
    pub bbox: BBox,
    pub class_id: usize,
}

/// Greedy matching. Detections are taken in the given order (descending score
/// within each image and class); each takes the highest-IoU unmatched ground
/// truth of the same image and class with IoU `>= iou_thr` (ties to the lower
/// index). Returns one true-positive flag per detection.
pub fn match_greedy(dets: &[DetectionRecord], gts: &[GtRecord], iou_thr: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.image_id != d.image_id || gt.class_id != d.class_id {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox);
                if v >= iou_thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP from true-positive flags in descending score
/// order. `None` when there is nothing to score (no ground truth and no
/// detections); zero when detections exist without ground truth.
pub fn average_precision(tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if tp.is_empty() { None } else { Some(0.0) };
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut ntp = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        ntp += t as usize;
        recall.push(ntp as f64 / n_gt as f64);
        precision.push(ntp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let total: f64 = recall_points()
        .iter()
        .map(|&r| {
            let idx = recall.partition_point(|&v| v < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / NUM_RECALL_POINTS as f64)
}

/// Scored detection outcome for accumulation: (score, true positive).
type Outcome = (f64, bool);

/// Matches one (image, class) group at one threshold with area-range
/// ignore semantics. `dets` must be sorted by descending score. Returns the
/// non-ignored outcomes and the number of non-ignored ground truths.
fn evaluate_group(
    dets: &[&DetectionRecord],
    gts: &[&GtObject],
    thr: f64,
    area: Option<(f64, f64)>,
) -> (Vec<Outcome>, usize) {
    let outside = |b: &BBox| area.is_some_and(|(lo, hi)| b.area() < lo || b.area() > hi);
    // Non-ignored ground truths first, order preserved within each half.
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by_key(|&g| outside(&gts[g].bbox));
    let ignored: Vec<bool> = order.iter().map(|&g| outside(&gts[g].bbox)).collect();
    let n_gt = ignored.iter().filter(|&&i| !i).count();

    let mut taken = vec![false; order.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (slot, &g) in order.iter().enumerate() {
            if taken[slot] {
                continue;
            }
            // A match on a real gt is never traded for an ignored one.
            if let Some((b, _)) = best {
                if !ignored[b] && ignored[slot] {
                    break;
                }
            }
            let v = iou(&d.bbox, &gts[g].bbox);
            if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((slot, v));
            }
        }
        match best {
            Some((slot, _)) => {
                taken[slot] = true;
                if !ignored[slot] {
                    out.push((d.score, true));
                }
            }
            None => {
                if !outside(&d.bbox) {
                    out.push((d.score, false));
                }
            }
        }
    }
    (out, n_gt)
}

/// Per-threshold AP averaged over classes for one area range.
fn evaluate_range(
    images: &[EvalImage],
    per_image_dets: &[Vec<&DetectionRecord>],
    num_classes: usize,
    area: Option<(f64, f64)>,
) -> Vec<f64> {
    iou_thresholds()
        .iter()
        .map(|&thr| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for class in 0..num_classes {
                let mut outcomes: Vec<Outcome> = Vec::new();
                let mut n_gt = 0;
                for (img, dets) in images.iter().zip(per_image_dets) {
                    let d: Vec<&DetectionRecord> =
                        dets.iter().copied().filter(|d| d.class_id == class).collect();
                    let g: Vec<&GtObject> =
                        img.gts.iter().filter(|g| g.class_id == class).collect();
                    let (o, n) = evaluate_group(&d, &g, thr, area);
                    outcomes.extend(o);
                    n_gt += n;
                }
                // Stable: equal scores keep image order.
                outcomes.sort_by(|a, b| b.0.total_cmp(&a.0));
                let tp: Vec<bool> = outcomes.iter().map(|o| o.1).collect();
                if let Some(ap) = average_precision(&tp, n_gt) {
                    sum += ap;
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// COCO-style AP summary with default options (100 detections per image, no
/// size buckets).
pub fn coco_ap(
    dets: &[DetectionRecord],
    images: &[EvalImage],
    num_classes: usize,
) -> Result<EvalSummary> {
    coco_ap_with(dets, images, num_classes, &EvalOptions::default())
}

pub fn coco_ap_with(
    dets: &[DetectionRecord],
    images: &[EvalImage],
    num_classes: usize,
    opts: &EvalOptions,
) -> Result<EvalSummary> {
    for img in images {
        for g in &img.gts {
            if g.class_id >= num_classes {
                return Err(Error::ClassOutOfRange {
                    class_id: g.class_id,
                    num_classes,
                });
            }
        }
    }
    let mut per_image: Vec<Vec<&DetectionRecord>> = vec![Vec::new(); images.len()];
    for d in dets {
        if d.class_id >= num_classes {
            return Err(Error::ClassOutOfRange {
                class_id: d.class_id,
                num_classes,
            });
        }
        if !d.score.is_finite() {
            return Err(Error::invalid("detection score", format!("{} is not finite", d.score)));
        }
        let slot = images
            .iter()
            .position(|img| img.image_id == d.image_id)
            .ok_or_else(|| {
                Error::invalid("detection image", format!("unknown image id {}", d.image_id))
            })?;
        per_image[slot].push(d);
    }
    for dets in per_image.iter_mut() {
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(opts.max_dets);
    }

    let per_threshold = evaluate_range(images, &per_image, num_classes, None);
    let bucket = |lo, hi| {
        opts.size_buckets
            .then(|| mean(&evaluate_range(images, &per_image, num_classes, Some((lo, hi)))))
    };
    Ok(EvalSummary {
        ap: mean(&per_threshold),
        ap50: per_threshold[0],
        ap75: per_threshold[5],
        ap_small: bucket(0.0, SMALL_AREA),
        ap_medium: bucket(SMALL_AREA, MEDIUM_AREA),
        ap_large: bucket(MEDIUM_AREA, f64::INFINITY),
        per_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(image_id: u64, b: BBox, class_id: usize, score: f64) -> DetectionRecord {
        DetectionRecord {
            image_id,
            bbox: b,
            class_id,
            score,
        }
    }

    fn image(id: u64, gts: &[(BBox, usize)]) -> EvalImage {
        EvalImage {
            image_id: id,
            gts: gts.iter().map(|&(b, c)| GtObject::new(b, c).unwrap()).collect(),
        }
    }

    #[test]
    fn thresholds() {
        let t = iou_thresholds();
        assert_eq!(t[0], 0.5);
        assert_eq!(t[2], 0.6);
        assert_eq!(t[5], 0.75);
        assert_eq!(t[9], 0.95);
        assert_eq!(recall_points()[100], 1.0);
    }

    #[test]
    fn greedy_matching() {
        let g = bx(0., 0., 10., 10.);
        let gts = [GtRecord {
            image_id: 0,
            bbox: g,
            class_id: 0,
        }];
        assert_eq!(match_greedy(&[det(0, g, 0, 0.9)], &gts, 0.5), vec![true]);
        let two = [det(0, g, 0, 0.9), det(0, g, 0, 0.8)];
        assert_eq!(match_greedy(&two, &gts, 0.5), vec![true, false]);
        // Wrong class or image never matches.
        assert_eq!(match_greedy(&[det(0, g, 1, 0.9)], &gts, 0.5), vec![false]);
        assert_eq!(match_greedy(&[det(1, g, 0, 0.9)], &gts, 0.5), vec![false]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert_eq!(average_precision(&[false, false], 3), Some(0.0));
        assert_eq!(average_precision(&[false], 0), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(average_precision(&[], 2), Some(0.0));
        // Half recall at full precision covers recall points 0..=50.
        assert!((average_precision(&[true], 2).unwrap() - 51.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn single_detection_at_iou_point_six() {
        let g = bx(0., 0., 10., 10.);
        let d = bx(0., 0., 6., 10.);
        assert_eq!(iou(&d, &g), 0.6);
        let s = coco_ap(&[det(7, d, 0, 0.5)], &[image(7, &[(g, 0)])], 1).unwrap();
        let expect = [1., 1., 1., 0., 0., 0., 0., 0., 0., 0.];
        assert_eq!(s.per_threshold, expect.to_vec());
        assert!((s.ap - 0.3).abs() < 1e-15);
        assert_eq!(s.ap50, 1.0);
        assert_eq!(s.ap75, 0.0);
    }

    #[test]
    fn perfect_and_empty() {
        let imgs = [
            image(0, &[(bx(0., 0., 10., 10.), 0), (bx(20., 20., 40., 50.), 1)]),
            image(1, &[(bx(5., 5., 9., 9.), 1)]),
        ];
        let dets: Vec<_> = imgs
            .iter()
            .flat_map(|im| im.gts.iter().map(move |g| det(im.image_id, g.bbox, g.class_id, 0.9)))
            .collect();
        let s = coco_ap(&dets, &imgs, 2).unwrap();
        assert_eq!((s.ap, s.ap50, s.ap75), (1.0, 1.0, 1.0));
        let s = coco_ap(&[], &imgs, 2).unwrap();
        assert_eq!((s.ap, s.ap50, s.ap75), (0.0, 0.0, 0.0));
    }

    #[test]
    fn class_out_of_range_is_an_error() {
        let imgs = [image(0, &[(bx(0., 0., 10., 10.), 0)])];
        assert!(matches!(
            coco_ap(&[det(0, bx(0., 0., 1., 1.), 3, 0.5)], &imgs, 2),
            Err(Error::ClassOutOfRange { class_id: 3, .. })
        ));
        assert!(coco_ap(&[det(9, bx(0., 0., 1., 1.), 0, 0.5)], &imgs, 2).is_err());
    }

    #[test]
    fn max_dets_per_image() {
        let g = bx(0., 0., 10., 10.);
        let imgs = [image(0, &[(g, 0)])];
        // 100 high-scoring misses push the true positive past the cap.
        let mut dets: Vec<_> = (0..100)
            .map(|i| det(0, bx(50., 50., 60., 60. + i as f64), 0, 0.9))
            .collect();
        dets.push(det(0, g, 0, 0.1));
        assert_eq!(coco_ap(&dets, &imgs, 1).unwrap().ap, 0.0);
    }

    #[test]
    fn size_buckets() {
        let small = bx(0., 0., 10., 10.);
        let large = bx(0., 0., 120., 120.);
        let imgs = [image(0, &[(small, 0), (large, 0)])];
        let dets = [det(0, small, 0, 0.9)];
        let opts = EvalOptions {
            size_buckets: true,
            ..Default::default()
        };
        let s = coco_ap_with(&dets, &imgs, 1, &opts).unwrap();
        assert_eq!(s.ap_small, Some(1.0));
        assert_eq!(s.ap_large, Some(0.0));
        // No medium gts and no medium detections: the class is excluded.
        assert_eq!(s.ap_medium, Some(0.0));
        assert!(s.ap < 1.0);
    }
}
