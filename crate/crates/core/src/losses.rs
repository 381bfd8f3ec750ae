//! Classification loss kernels (focal, varifocal, quality focal) and the
//! total detection loss, each returning an exact derivative with respect to
//! the predicted probability.
//!
//! Kernels take probabilities, not logits. Probabilities are clamped to
//! `[PROB_EPS, 1 - PROB_EPS]` before any logarithm and the returned gradient
//! is that of the clamped expression (zero outside the clamp range).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou_loss, BBox};

pub const PROB_EPS: f64 = 1e-12;

/// Per-class predicted probabilities. Independent per class (multi-label).
pub type ScoreVector = Vec<f64>;
/// Per-class training targets: all zero for background, one nonzero IoU entry for foreground.
pub type TargetVector = Vec<f64>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Binary focal loss against hard 0/1 labels.
    Fl,
    /// Varifocal loss against IoU-valued targets.
    #[default]
    Vfl,
    /// Quality focal loss against IoU-valued targets.
    Qfl,
}

impl LossVariant {
    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::Fl => "FL",
            LossVariant::Vfl => "VFL",
            LossVariant::Qfl => "QFL",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fl" | "focal" => Ok(LossVariant::Fl),
            "vfl" | "varifocal" => Ok(LossVariant::Vfl),
            "qfl" | "gfl" | "quality_focal" => Ok(LossVariant::Qfl),
            other => Err(Error::Config(format!("unknown loss variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Negative-branch weight of the varifocal loss.
    pub alpha: f64,
    /// Down-weighting exponent shared by the focal and varifocal losses.
    pub gamma: f64,
    /// Positive-class weight of the binary focal loss.
    pub fl_alpha: f64,
    /// Exponent of the quality focal loss modulating factor.
    pub beta_qfl: f64,
    /// Weight of the initial-box GIoU term.
    pub lambda0: f64,
    /// Weight of the refined-box GIoU term.
    pub lambda1: f64,
    /// Weight positive varifocal terms by their target.
    pub q_weighting: bool,
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            gamma: 2.0,
            fl_alpha: 0.25,
            beta_qfl: 2.0,
            lambda0: 1.5,
            lambda1: 2.0,
            q_weighting: true,
            variant: LossVariant::Vfl,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("loss.alpha", self.alpha),
            ("loss.gamma", self.gamma),
            ("loss.fl_alpha", self.fl_alpha),
            ("loss.beta_qfl", self.beta_qfl),
            ("loss.lambda0", self.lambda0),
            ("loss.lambda1", self.lambda1),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.fl_alpha > 1.0 {
            return Err(Error::Config("loss.fl_alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Clamped probability and the derivative of the clamp (1 inside, 0 outside).
fn clamp_prob(p: f64) -> (f64, f64) {
    if p < PROB_EPS {
        (PROB_EPS, 0.0)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, 0.0)
    } else {
        (p, 1.0)
    }
}

fn check_target(q: f64) -> Result<()> {
    if (0.0..=1.0).contains(&q) {
        Ok(())
    } else {
        Err(Error::TargetOutOfRange(q))
    }
}

/// `-w * p^gamma * ln(1 - p)` and its derivative; the down-weighted negative term.
fn negative_term(p: f64, w: f64, gamma: f64) -> (f64, f64) {
    let pg = p.powf(gamma);
    let ln1m = (1.0 - p).ln();
    let loss = -w * pg * ln1m;
    let dpg = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
    let grad = -w * (dpg * ln1m - pg / (1.0 - p));
    (loss, grad)
}

/// Binary cross entropy against a soft target and its derivative.
fn bce(p: f64, q: f64) -> (f64, f64) {
    let loss = -(q * p.ln() + (1.0 - q) * (1.0 - p).ln());
    let grad = -q / p + (1.0 - q) / (1.0 - p);
    (loss, grad)
}

/// Focal loss for one binary decision: `-alpha (1-p)^gamma ln p` for a
/// positive, `-(1-alpha) p^gamma ln(1-p)` for a negative.
pub fn focal_loss(p: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let (p, dclamp) = clamp_prob(p);
    let (loss, grad) = if positive {
        let omp = 1.0 - p;
        let mg = omp.powf(gamma);
        let lnp = p.ln();
        let dmg = if gamma == 0.0 { 0.0 } else { -gamma * omp.powf(gamma - 1.0) };
        (-alpha * mg * lnp, -alpha * (dmg * lnp + mg / p))
    } else {
        negative_term(p, 1.0 - alpha, gamma)
    };
    (loss, grad * dclamp)
}

/// Varifocal loss. Positives (`q > 0`) use a target-weighted BCE (plain BCE
/// when `q_weighting` is off); negatives use `-alpha p^gamma ln(1-p)`.
pub fn varifocal_loss(
    p: f64,
    q: f64,
    alpha: f64,
    gamma: f64,
    q_weighting: bool,
) -> Result<(f64, f64)> {
    check_target(q)?;
    let (p, dclamp) = clamp_prob(p);
    let (loss, grad) = if q > 0.0 {
        let (l, g) = bce(p, q);
        let w = if q_weighting { q } else { 1.0 };
        (w * l, w * g)
    } else {
        negative_term(p, alpha, gamma)
    };
    Ok((loss, grad * dclamp))
}

/// Quality focal loss `|q - p|^beta * BCE(p, q)`.
pub fn quality_focal_loss(p: f64, q: f64, beta: f64) -> Result<(f64, f64)> {
    check_target(q)?;
    let (p, dclamp) = clamp_prob(p);
    let diff = p - q;
    let ad = diff.abs();
    let m = ad.powf(beta);
    let dm = if ad == 0.0 || beta == 0.0 {
        0.0
    } else {
        beta * ad.powf(beta - 1.0) * diff.signum()
    };
    let (l, g) = bce(p, q);
    Ok((m * l, (dm * l + m * g) * dclamp))
}

/// Dispatches one per-class classification term by loss variant.
pub fn classification_loss(p: f64, q: f64, cfg: &LossConfig) -> Result<(f64, f64)> {
    match cfg.variant {
        LossVariant::Fl => {
            check_target(q)?;
            Ok(focal_loss(p, q > 0.0, cfg.fl_alpha, cfg.gamma))
        }
        LossVariant::Vfl => varifocal_loss(p, q, cfg.alpha, cfg.gamma, cfg.q_weighting),
        LossVariant::Qfl => quality_focal_loss(p, q, cfg.beta_qfl),
    }
}

/// One location's predictions fed to [`total_loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct LocationPrediction {
    pub scores: ScoreVector,
    pub init_box: BBox,
    pub refined_box: BBox,
}

/// One location's supervision. `gt_box` is `None` for background.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationTarget {
    pub target: TargetVector,
    pub gt_box: Option<BBox>,
    /// Constant weight on both box terms (zero for background).
    pub q_weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocationGrad {
    pub d_scores: Vec<f64>,
    pub d_init_box: [f64; 4],
    pub d_refined_box: [f64; 4],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub bbox_init: f64,
    pub bbox_refined: f64,
    pub num_pos: usize,
    pub grads: Vec<LocationGrad>,
}

/// Total detection loss: normalized classification sum plus target-weighted
/// GIoU losses on the initial and refined boxes.
///
/// The normalizer is the number of foreground locations, or 1 for an
/// all-background batch.
pub fn total_loss(
    preds: &[LocationPrediction],
    targets: &[LocationTarget],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let num_pos = targets.iter().filter(|t| t.gt_box.is_some()).count();
    let norm = num_pos.max(1) as f64;

    let mut out = LossBreakdown {
        num_pos,
        grads: Vec::with_capacity(preds.len()),
        ..Default::default()
    };
    for (i, (pred, tgt)) in preds.iter().zip(targets).enumerate() {
        if pred.scores.len() != tgt.target.len() {
            return Err(Error::ShapeMismatch(format!(
                "location {i}: {} scores vs {} targets",
                pred.scores.len(),
                tgt.target.len()
            )));
        }
        let mut g = LocationGrad {
            d_scores: vec![0.0; pred.scores.len()],
            ..Default::default()
        };
        for ((&p, &q), d) in pred.scores.iter().zip(&tgt.target).zip(&mut g.d_scores) {
            let (l, dl) = classification_loss(p, q, cfg)?;
            out.cls += l;
            *d = dl / norm;
        }
        if let Some(gt) = &tgt.gt_box {
            let w = tgt.q_weight;
            let (li, gi) = giou_loss(&pred.init_box, gt);
            let (lr, gr) = giou_loss(&pred.refined_box, gt);
            out.bbox_init += w * li;
            out.bbox_refined += w * lr;
            for k in 0..4 {
                g.d_init_box[k] = cfg.lambda0 * w * gi[k] / norm;
                g.d_refined_box[k] = cfg.lambda1 * w * gr[k] / norm;
            }
        }
        out.grads.push(g);
    }
    out.cls /= norm;
    out.bbox_init *= cfg.lambda0 / norm;
    out.bbox_refined *= cfg.lambda1 / norm;
    out.total = out.cls + out.bbox_init + out.bbox_refined;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn focal_examples() {
        let (l, _) = focal_loss(0.5, true, 0.25, 2.0);
        assert_relative_eq!(l, 0.25 * 0.25 * LN2, epsilon = 1e-15);
        assert!(focal_loss(1.0, true, 0.25, 2.0).0 < 1e-20);
        for p in [0.1, 0.5, 0.9] {
            let (pos, _) = focal_loss(p, true, 0.5, 0.0);
            let (neg, _) = focal_loss(p, false, 0.5, 0.0);
            assert_relative_eq!(pos, 0.5 * -(p as f64).ln(), epsilon = 1e-15);
            assert_relative_eq!(neg, 0.5 * -(1.0 - p as f64).ln(), epsilon = 1e-15);
        }
    }

    #[test]
    fn varifocal_examples() {
        let (l, _) = varifocal_loss(0.5, 0.0, 0.75, 2.0, true).unwrap();
        assert_relative_eq!(l, 0.75 * 0.25 * LN2, epsilon = 1e-15);
        let (l, _) = varifocal_loss(1.0 - 1e-9, 1.0, 0.75, 2.0, true).unwrap();
        assert!(l < 1e-8);
        let (l, _) = varifocal_loss(0.8, 0.8, 0.75, 2.0, true).unwrap();
        let expect = -0.8 * (0.8 * 0.8f64.ln() + 0.2 * 0.2f64.ln());
        assert_relative_eq!(l, expect, epsilon = 1e-15);
        let (plain, _) = varifocal_loss(0.8, 0.8, 0.75, 2.0, false).unwrap();
        assert_relative_eq!(plain, expect / 0.8, epsilon = 1e-15);
        assert!(matches!(
            varifocal_loss(0.5, 1.5, 0.75, 2.0, true),
            Err(Error::TargetOutOfRange(_))
        ));
    }

    #[test]
    fn quality_focal_examples() {
        for q in [0.0f64, 0.3, 1.0] {
            assert!(quality_focal_loss(q.max(0.01), q.max(0.01), 2.0).unwrap().0 < 1e-20);
        }
        let (a, _) = quality_focal_loss(0.5, 1.0, 2.0).unwrap();
        let (b, _) = quality_focal_loss(0.5, 0.0, 2.0).unwrap();
        assert_relative_eq!(a, 0.25 * LN2, epsilon = 1e-15);
        assert_relative_eq!(b, 0.25 * LN2, epsilon = 1e-15);
        assert!(quality_focal_loss(0.5, -0.1, 2.0).is_err());
    }

    #[test]
    fn clamped_probabilities_stay_finite() {
        for p in [0.0, 1.0, -0.5, 1.5] {
            let (l, g) = focal_loss(p, true, 0.25, 2.0);
            assert!(l.is_finite() && g.is_finite());
            let (l, g) = varifocal_loss(p, 0.0, 0.75, 2.0, true).unwrap();
            assert!(l.is_finite() && g.is_finite());
            let (l, g) = quality_focal_loss(p, 0.4, 2.0).unwrap();
            assert!(l.is_finite() && g.is_finite());
        }
    }

    #[test]
    fn varifocal_minimum_at_target() {
        for &q in &[0.1, 0.37, 0.5, 0.8, 1.0] {
            let grid: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
            let best = grid
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    let la = varifocal_loss(a, q, 0.75, 2.0, true).unwrap().0;
                    let lb = varifocal_loss(b, q, 0.75, 2.0, true).unwrap().0;
                    la.partial_cmp(&lb).unwrap()
                })
                .unwrap();
            assert!((best - q).abs() <= 0.5e-3 + 1e-12, "q={q} argmin={best}");
        }
    }

    #[test]
    fn monotone_branches() {
        let mut prev_neg = -1.0;
        let mut prev_pos = f64::INFINITY;
        for i in 1..100 {
            let p = i as f64 / 100.0;
            let neg = varifocal_loss(p, 0.0, 0.75, 2.0, true).unwrap().0;
            let pos = focal_loss(p, true, 0.25, 2.0).0;
            assert!(neg > prev_neg);
            assert!(pos < prev_pos);
            prev_neg = neg;
            prev_pos = pos;
        }
    }

    fn fg(target: Vec<f64>, gt: BBox, w: f64) -> LocationTarget {
        LocationTarget {
            target,
            gt_box: Some(gt),
            q_weight: w,
        }
    }

    #[test]
    fn total_loss_perfect_prediction_is_zero() {
        let gt = BBox::new(0., 0., 10., 10.).unwrap();
        let preds = [LocationPrediction {
            scores: vec![0.0, 1.0],
            init_box: gt,
            refined_box: gt,
        }];
        let tg = [fg(vec![0.0, 1.0], gt, 1.0)];
        let out = total_loss(&preds, &tg, &LossConfig::default()).unwrap();
        assert!(out.total.abs() < 1e-9, "{}", out.total);
    }

    #[test]
    fn total_loss_all_background_is_negative_vfl_sum() {
        let b = BBox::new(0., 0., 1., 1.).unwrap();
        let preds: Vec<_> = (0..3)
            .map(|_| LocationPrediction {
                scores: vec![0.5, 0.5],
                init_box: b,
                refined_box: b,
            })
            .collect();
        let tg: Vec<_> = (0..3)
            .map(|_| LocationTarget {
                target: vec![0.0, 0.0],
                gt_box: None,
                q_weight: 0.0,
            })
            .collect();
        let out = total_loss(&preds, &tg, &LossConfig::default()).unwrap();
        assert_eq!(out.num_pos, 0);
        assert_relative_eq!(out.total, 6.0 * 0.75 * 0.25 * LN2, epsilon = 1e-14);
        assert_eq!(out.bbox_init + out.bbox_refined, 0.0);
    }

    #[test]
    fn total_loss_rejects_misaligned_inputs() {
        let b = BBox::new(0., 0., 1., 1.).unwrap();
        let preds = [LocationPrediction {
            scores: vec![0.5],
            init_box: b,
            refined_box: b,
        }];
        assert!(total_loss(&preds, &[], &LossConfig::default()).is_err());
    }
}
