//! Detection score composition, ground-truth oracle replacement, greedy and
//! soft non-maximum suppression, and the inference filter pipeline.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::assigner::GtObject;
use crate::error::{Error, Result};
use crate::geometry::{centerness, encode_distances, iou, BBox, Point};
use crate::losses::ScoreVector;

/// One location's full prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bbox: BBox,
    pub scores: ScoreVector,
    pub level: usize,
    /// Auxiliary localization estimate (centerness or IoU), when the head has one.
    pub ctr: Option<f64>,
    /// The location the box was regressed from.
    pub location: Point,
    pub source_index: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    /// Classification score alone.
    Cls,
    /// Classification score times the auxiliary estimate.
    ClsTimesCtr,
    /// The score vector already is the joint IoU-aware score.
    #[default]
    Iacs,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    #[default]
    None,
    /// Centerness replaced by its true value.
    GtCtr,
    /// Centerness replaced by the box IoU with its ground truth.
    GtCtrIou,
    /// Box replaced by its ground truth.
    GtBbox,
    /// Score at the ground-truth class set to 1.
    GtCls,
    /// Score at the ground-truth class set to the box IoU with its ground truth.
    GtClsIou,
}

impl OracleMode {
    pub const ALL: [OracleMode; 6] = [
        OracleMode::None,
        OracleMode::GtCtr,
        OracleMode::GtCtrIou,
        OracleMode::GtBbox,
        OracleMode::GtCls,
        OracleMode::GtClsIou,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OracleMode::None => "none",
            OracleMode::GtCtr => "gt_ctr",
            OracleMode::GtCtrIou => "gt_ctr_iou",
            OracleMode::GtBbox => "gt_bbox",
            OracleMode::GtCls => "gt_cls",
            OracleMode::GtClsIou => "gt_cls_iou",
        }
    }
}

/// Per-class ranking scores of a candidate.
pub fn compose_score(c: &Candidate, mode: RankMode) -> Result<Vec<f64>> {
    match mode {
        RankMode::Cls | RankMode::Iacs => Ok(c.scores.clone()),
        RankMode::ClsTimesCtr => {
            let ctr = c.ctr.ok_or(Error::MissingCenterness(c.source_index))?;
            Ok(c.scores.iter().map(|s| s * ctr).collect())
        }
    }
}

/// Replaces predicted quantities of foreground candidates with ground-truth
/// values. `assoc[i]` is the ground-truth index of candidate `i`, `None` for
/// background; background candidates are left untouched.
pub fn apply_oracle(
    cands: &[Candidate],
    gts: &[GtObject],
    assoc: &[Option<usize>],
    mode: OracleMode,
) -> Result<Vec<Candidate>> {
    if mode == OracleMode::None {
        return Ok(cands.to_vec());
    }
    if assoc.len() != cands.len() {
        return Err(Error::MissingAssociation(format!(
            "{} associations for {} candidates",
            assoc.len(),
            cands.len()
        )));
    }
    cands
        .iter()
        .zip(assoc)
        .map(|(c, a)| {
            let mut c = c.clone();
            let Some(gi) = *a else {
                return Ok(c);
            };
            let gt = gts.get(gi).ok_or_else(|| {
                Error::MissingAssociation(format!(
                    "candidate {} points at gt {gi}, only {} exist",
                    c.source_index,
                    gts.len()
                ))
            })?;
            if gt.class_id >= c.scores.len() {
                return Err(Error::ClassOutOfRange {
                    class_id: gt.class_id,
                    num_classes: c.scores.len(),
                });
            }
            match mode {
                OracleMode::None => {}
                OracleMode::GtCtr => {
                    let ctr = encode_distances(c.location, &gt.bbox)
                        .map(|d| centerness(&d))
                        .unwrap_or(0.0);
                    c.ctr = Some(ctr);
                }
                OracleMode::GtCtrIou => c.ctr = Some(iou(&c.bbox, &gt.bbox)),
                OracleMode::GtBbox => c.bbox = gt.bbox,
                OracleMode::GtCls => c.scores[gt.class_id] = 1.0,
                OracleMode::GtClsIou => c.scores[gt.class_id] = iou(&c.bbox, &gt.bbox),
            }
            Ok(c)
        })
        .collect()
}

/// A box with a single scalar score, the unit NMS operates on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub source_index: usize,
}

/// Descending score, ties to the lower source index.
fn rank_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.source_index.cmp(&b.source_index))
}

/// Greedy NMS. Keeps the best remaining box and drops every remaining box
/// whose IoU with it is strictly greater than `iou_thr`. Output is in
/// descending score order.
pub fn nms(cands: &[ScoredBox], iou_thr: f64) -> Vec<ScoredBox> {
    let mut order = cands.to_vec();
    order.sort_by(rank_order);
    let mut suppressed = vec![false; order.len()];
    let mut keep = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        keep.push(order[i]);
        for j in i + 1..order.len() {
            if !suppressed[j] && iou(&order[i].bbox, &order[j].bbox) > iou_thr {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftNmsMethod {
    #[default]
    Linear,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftNmsConfig {
    pub method: SoftNmsMethod,
    pub iou_thr: f64,
    pub sigma: f64,
    pub score_floor: f64,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        Self {
            method: SoftNmsMethod::Linear,
            iou_thr: 0.3,
            sigma: 0.5,
            score_floor: 1e-3,
        }
    }
}

/// Soft-NMS: repeatedly takes the best remaining box and decays the scores of
/// the others by their overlap with it. Linear decay `(1 - IoU)` applies only
/// above `iou_thr`; Gaussian decay `exp(-IoU^2 / sigma)` applies to all.
/// Boxes whose score falls below `score_floor` are dropped.
pub fn soft_nms(cands: &[ScoredBox], cfg: &SoftNmsConfig) -> Result<Vec<ScoredBox>> {
    if cfg.method == SoftNmsMethod::Gaussian && !(cfg.sigma > 0.0) {
        return Err(Error::invalid("soft-nms sigma", "must be positive"));
    }
    let mut pool: Vec<ScoredBox> = cands.to_vec();
    let mut out = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best = (0..pool.len())
            .min_by(|&i, &j| rank_order(&pool[i], &pool[j]))
            .unwrap_or(0);
        let top = pool.swap_remove(best);
        for c in pool.iter_mut() {
            let v = iou(&top.bbox, &c.bbox);
            let decay = match cfg.method {
                SoftNmsMethod::Linear if v > cfg.iou_thr => 1.0 - v,
                SoftNmsMethod::Linear => 1.0,
                SoftNmsMethod::Gaussian => (-(v * v) / cfg.sigma).exp(),
            };
            c.score *= decay;
        }
        pool.retain(|c| c.score >= cfg.score_floor);
        if top.score >= cfg.score_floor {
            out.push(top);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub score_floor: f64,
    pub topk_per_level: usize,
    pub nms_thr: f64,
    pub mode: RankMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_floor: 0.05,
            topk_per_level: 1000,
            nms_thr: 0.6,
            mode: RankMode::Iacs,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::Config(format!("ranking: score_floor {} is outside [0, 1]", self.score_floor)));
        }
        if !(0.0..=1.0).contains(&self.nms_thr) {
            return Err(Error::Config(format!("ranking: nms_thr {} is outside [0, 1]", self.nms_thr)));
        }
        if self.topk_per_level == 0 {
            return Err(Error::Config("ranking: topk_per_level must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    pub source_index: usize,
}

/// Inference post-processing for one image.
///
/// Per level: compose ranking scores, drop candidates whose best score is
/// `<= score_floor`, keep the `topk_per_level` best by that score. The
/// survivors of all levels are expanded into one entry per class scoring
/// above the floor, and NMS runs independently per class. Output is ordered by
/// descending score, then class, then source index.
pub fn inference_filter(levels: &[Vec<Candidate>], cfg: &InferenceConfig) -> Result<Vec<Detection>> {
    let mut per_class: Vec<Vec<ScoredBox>> = Vec::new();
    for cands in levels {
        let mut scored = Vec::with_capacity(cands.len());
        for c in cands {
            let s = compose_score(c, cfg.mode)?;
            let best = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if best > cfg.score_floor {
                scored.push((best, c, s));
            }
        }
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.source_index.cmp(&b.1.source_index))
        });
        scored.truncate(cfg.topk_per_level);
        for (_, c, s) in scored {
            if per_class.len() < s.len() {
                per_class.resize(s.len(), Vec::new());
            }
            for (class, &v) in s.iter().enumerate() {
                if v > cfg.score_floor {
                    per_class[class].push(ScoredBox {
                        bbox: c.bbox,
                        score: v,
                        source_index: c.source_index,
                    });
                }
            }
        }
    }
    let mut out: Vec<Detection> = per_class
        .iter()
        .enumerate()
        .flat_map(|(class_id, boxes)| {
            nms(boxes, cfg.nms_thr).into_iter().map(move |b| Detection {
                bbox: b.bbox,
                class_id,
                score: b.score,
                source_index: b.source_index,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.source_index.cmp(&b.source_index))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sb(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, idx: usize) -> ScoredBox {
        ScoredBox {
            bbox: BBox::new(x1, y1, x2, y2).unwrap(),
            score,
            source_index: idx,
        }
    }

    fn cand(scores: Vec<f64>, ctr: Option<f64>, idx: usize) -> Candidate {
        Candidate {
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            scores,
            level: 0,
            ctr,
            location: Point::new(5.0, 5.0),
            source_index: idx,
        }
    }

    #[test]
    fn compose_modes() {
        let c = cand(vec![0.8, 0.2], Some(0.5), 0);
        assert_eq!(compose_score(&c, RankMode::ClsTimesCtr).unwrap(), vec![0.4, 0.1]);
        assert_eq!(compose_score(&c, RankMode::Cls).unwrap(), c.scores);
        assert_eq!(compose_score(&c, RankMode::Iacs).unwrap(), c.scores);
        let bare = cand(vec![0.8], None, 3);
        assert!(matches!(
            compose_score(&bare, RankMode::ClsTimesCtr),
            Err(Error::MissingCenterness(3))
        ));
    }

    #[test]
    fn oracle_replacements() {
        let gts = [GtObject::new(BBox::new(0.0, 0.0, 10.0, 20.0).unwrap(), 2).unwrap()];
        let fg = cand(vec![0.1, 0.2, 0.3], Some(0.4), 0);
        let bg = cand(vec![0.1, 0.2, 0.3], Some(0.4), 1);
        let cands = [fg.clone(), bg.clone()];
        let assoc = [Some(0), None];

        let o = apply_oracle(&cands, &gts, &assoc, OracleMode::GtCls).unwrap();
        assert_eq!(o[0].scores, vec![0.1, 0.2, 1.0]);
        assert_eq!(o[1], bg);

        let o = apply_oracle(&cands, &gts, &assoc, OracleMode::GtClsIou).unwrap();
        assert_eq!(o[0].scores[2], 0.5);

        let o = apply_oracle(&cands, &gts, &assoc, OracleMode::GtBbox).unwrap();
        assert_eq!(iou(&o[0].bbox, &gts[0].bbox), 1.0);

        let o = apply_oracle(&cands, &gts, &assoc, OracleMode::GtCtrIou).unwrap();
        assert_eq!(o[0].ctr, Some(0.5));

        // location (5, 5) in [0,0,10,20]: l=r=5, t=5, b=15
        let o = apply_oracle(&cands, &gts, &assoc, OracleMode::GtCtr).unwrap();
        assert!((o[0].ctr.unwrap() - (5.0f64 / 15.0).sqrt()).abs() < 1e-15);

        assert_eq!(apply_oracle(&cands, &gts, &[], OracleMode::None).unwrap(), cands.to_vec());
        assert!(apply_oracle(&cands, &gts, &[Some(0)], OracleMode::GtCls).is_err());
        assert!(apply_oracle(&cands, &gts, &[Some(4), None], OracleMode::GtCls).is_err());
    }

    #[test]
    fn nms_examples() {
        let kept = nms(&[sb(0., 0., 10., 10., 0.8, 1), sb(0., 0., 10., 10., 0.9, 0)], 0.6);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let kept = nms(&[sb(0., 0., 1., 1., 0.8, 0), sb(5., 5., 6., 6., 0.9, 1)], 0.6);
        assert_eq!(kept.len(), 2);

        // A overlaps B, B overlaps C (IoU 1/3 each), A and C disjoint.
        let a = sb(0., 0., 10., 10., 0.9, 0);
        let b = sb(5., 0., 15., 10., 0.8, 1);
        let c = sb(10., 0., 20., 10., 0.7, 2);
        assert_eq!(iou(&a.bbox, &c.bbox), 0.0);
        let kept: Vec<_> = nms(&[c, a, b], 0.3).iter().map(|k| k.source_index).collect();
        assert_eq!(kept, vec![0, 2]);
    }

    #[test]
    fn nms_threshold_is_strict() {
        // IoU exactly 1/3 survives a 1/3 threshold.
        let kept = nms(&[sb(0., 0., 10., 10., 0.9, 0), sb(5., 0., 15., 10., 0.8, 1)], 1.0 / 3.0);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let kept = nms(&[sb(0., 0., 10., 10., 0.5, 7), sb(0., 0., 10., 10., 0.5, 3)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].source_index, 3);
    }

    #[test]
    fn soft_nms_examples() {
        let cfg = SoftNmsConfig::default();
        let pool = [sb(0., 0., 1., 1., 0.8, 0), sb(5., 5., 6., 6., 0.9, 1)];
        let out = soft_nms(&pool, &cfg).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(out[1].score, 0.8);

        let pool = [sb(0., 0., 10., 10., 0.9, 0), sb(0., 0., 10., 10., 0.8, 1)];
        let out = soft_nms(&pool, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].source_index, 0);

        let bad = SoftNmsConfig {
            method: SoftNmsMethod::Gaussian,
            sigma: 0.0,
            ..cfg
        };
        assert!(soft_nms(&pool, &bad).is_err());
    }

    #[test]
    fn inference_examples() {
        let cfg = InferenceConfig::default();
        let low = vec![vec![cand(vec![0.05, 0.01], None, 0), cand(vec![0.02, 0.04], None, 1)]];
        assert!(inference_filter(&low, &cfg).unwrap().is_empty());
        let one = vec![vec![cand(vec![0.9, 0.01], None, 0)]];
        let out = inference_filter(&one, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].class_id, out[0].score), (0, 0.9));
    }

    fn arb_pool() -> impl Strategy<Value = Vec<ScoredBox>> {
        prop::collection::vec(
            (0.0..50.0f64, 0.0..50.0f64, 1.0..20.0f64, 1.0..20.0f64, 0.0..1.0f64),
            0..30,
        )
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (x, y, w, h, s))| sb(x, y, x + w, y + h, (s * 8.0).round() / 8.0, i))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn nms_properties(pool in arb_pool(), thr in 0.0..1.0f64) {
            let kept = nms(&pool, thr);
            prop_assert_eq!(&nms(&kept, thr), &kept);
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    prop_assert!(iou(&kept[i].bbox, &kept[j].bbox) <= thr);
                }
            }
            for w in kept.windows(2) {
                prop_assert!(rank_order(&w[0], &w[1]) == Ordering::Less);
            }
        }

        #[test]
        fn soft_nms_never_raises_scores(pool in arb_pool(), gaussian in any::<bool>()) {
            let cfg = SoftNmsConfig {
                method: if gaussian { SoftNmsMethod::Gaussian } else { SoftNmsMethod::Linear },
                ..Default::default()
            };
            for out in soft_nms(&pool, &cfg).unwrap() {
                prop_assert!(out.score <= pool[out.source_index].score);
            }
        }

        #[test]
        fn constant_ctr_preserves_order(scores in prop::collection::vec(0.0..1.0f64, 1..20), ctr in 0.01..1.0f64) {
            let cands: Vec<_> = scores.iter().enumerate().map(|(i, &s)| cand(vec![s], Some(ctr), i)).collect();
            let order = |mode| {
                let mut idx: Vec<usize> = (0..cands.len()).collect();
                let s: Vec<f64> = cands.iter().map(|c| compose_score(c, mode).unwrap()[0]).collect();
                idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
                idx
            };
            prop_assert_eq!(order(RankMode::Cls), order(RankMode::ClsTimesCtr));
        }
    }
}
