//! Adaptive training sample selection over grid locations and construction
//! of IoU-valued classification targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Point};
use crate::losses::LocationTarget;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub stride: u32,
    pub height: usize,
    pub width: usize,
}

/// Feature-pyramid layout. Locations are enumerated level by level, row-major
/// inside each level; location `(row, col)` sits at
/// `((col + 0.5) * stride, (row + 0.5) * stride)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub levels: Vec<LevelSpec>,
    /// Side of the square virtual anchor used for assignment statistics, in strides.
    pub anchor_scale: f64,
}

pub const DEFAULT_ANCHOR_SCALE: f64 = 8.0;
pub const DEFAULT_ATSS_TOPK: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Location {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub stride: u32,
    pub point: Point,
}

impl GridSpec {
    pub fn new(levels: Vec<LevelSpec>) -> Result<Self> {
        let g = Self {
            levels,
            anchor_scale: DEFAULT_ANCHOR_SCALE,
        };
        g.validate()?;
        Ok(g)
    }

    /// One level per stride, each covering a `width x height` image.
    pub fn for_image(width: f64, height: f64, strides: &[u32]) -> Result<Self> {
        let levels = strides
            .iter()
            .map(|&s| LevelSpec {
                stride: s,
                height: (height / s as f64).ceil().max(1.0) as usize,
                width: (width / s as f64).ceil().max(1.0) as usize,
            })
            .collect();
        Self::new(levels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::invalid("grid", "at least one level is required"));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.stride == 0 || l.height == 0 || l.width == 0 {
                return Err(Error::invalid("grid", format!("level {i} has a zero dimension")));
            }
            if i > 0 && l.stride <= self.levels[i - 1].stride {
                return Err(Error::invalid("grid", "strides must be strictly increasing"));
            }
        }
        if !(self.anchor_scale.is_finite() && self.anchor_scale > 0.0) {
            return Err(Error::invalid("grid", "anchor scale must be positive"));
        }
        Ok(())
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.levels[level].height * self.levels[level].width
    }

    pub fn level_offset(&self, level: usize) -> usize {
        (0..level).map(|l| self.level_len(l)).sum()
    }

    pub fn num_locations(&self) -> usize {
        (0..self.levels.len()).map(|l| self.level_len(l)).sum()
    }

    pub fn locations(&self) -> Vec<Location> {
        let mut out = Vec::with_capacity(self.num_locations());
        for (level, spec) in self.levels.iter().enumerate() {
            let s = spec.stride as f64;
            for row in 0..spec.height {
                for col in 0..spec.width {
                    out.push(Location {
                        level,
                        row,
                        col,
                        stride: spec.stride,
                        point: Point::new((col as f64 + 0.5) * s, (row as f64 + 0.5) * s),
                    });
                }
            }
        }
        out
    }

    /// Square virtual anchor centered on a location.
    pub fn virtual_anchor(&self, loc: &Location) -> BBox {
        let half = 0.5 * self.anchor_scale * loc.stride as f64;
        BBox {
            x1: loc.point.x - half,
            y1: loc.point.y - half,
            x2: loc.point.x + half,
            y2: loc.point.y + half,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: BBox,
    pub class_id: usize,
}

impl GtObject {
    pub fn new(bbox: BBox, class_id: usize) -> Result<Self> {
        bbox.validate()?;
        if bbox.area() <= 0.0 {
            return Err(Error::invalid("ground-truth box", "area must be positive"));
        }
        Ok(Self { bbox, class_id })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AssignedGt {
    pub gt_index: usize,
    pub class_id: usize,
}

/// Per-location foreground/background labels; `None` is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub labels: Vec<Option<AssignedGt>>,
}

impl Assignment {
    pub fn num_foreground(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn gt_indices(&self) -> Vec<Option<usize>> {
        self.labels.iter().map(|l| l.map(|a| a.gt_index)).collect()
    }
}

/// Candidate location indices for one ground truth: the `k` locations per
/// level closest to its center (ties by lower index).
pub fn atss_candidates(grid: &GridSpec, locs: &[Location], gt: &BBox, k: usize) -> Vec<usize> {
    let c = gt.center();
    let mut out = Vec::new();
    for level in 0..grid.levels.len() {
        let start = grid.level_offset(level);
        let mut idx: Vec<(f64, usize)> = (start..start + grid.level_len(level))
            .map(|i| {
                let p = locs[i].point;
                ((p.x - c.x).powi(2) + (p.y - c.y).powi(2), i)
            })
            .collect();
        idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(idx.iter().take(k).map(|&(_, i)| i));
    }
    out
}

/// Mean plus sample standard deviation of candidate IoUs.
pub fn atss_threshold(ious: &[f64]) -> f64 {
    let n = ious.len();
    if n == 0 {
        return f64::INFINITY;
    }
    let mean = ious.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (ious.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    mean + std
}

/// Assigns foreground locations per ground truth with an adaptive
/// `mean + std` IoU threshold over the nearest candidates. A location claimed
/// by several ground truths goes to the one whose virtual anchor overlaps it
/// most (ties to the lower index).
pub fn atss_assign(grid: &GridSpec, gts: &[GtObject], k: usize) -> Result<Assignment> {
    grid.validate()?;
    if k == 0 {
        return Err(Error::invalid("atss k", "must be at least 1"));
    }
    let locs = grid.locations();
    let mut labels: Vec<Option<AssignedGt>> = vec![None; locs.len()];
    let mut best_iou = vec![f64::NEG_INFINITY; locs.len()];

    for (gi, gt) in gts.iter().enumerate() {
        let cands = atss_candidates(grid, &locs, &gt.bbox, k);
        let ious: Vec<f64> = cands
            .iter()
            .map(|&i| iou(&grid.virtual_anchor(&locs[i]), &gt.bbox))
            .collect();
        let thr = atss_threshold(&ious);
        for (&i, &v) in cands.iter().zip(&ious) {
            if v >= thr && gt.bbox.contains_strictly(locs[i].point) && v > best_iou[i] {
                best_iou[i] = v;
                labels[i] = Some(AssignedGt {
                    gt_index: gi,
                    class_id: gt.class_id,
                });
            }
        }
    }
    Ok(Assignment { labels })
}

/// IoU-valued targets: a foreground location gets `iou(predicted, gt)` at its
/// class and zeros elsewhere; the same IoU is its box-loss weight.
pub fn build_targets(
    assignment: &Assignment,
    predicted_boxes: &[BBox],
    gts: &[GtObject],
    num_classes: usize,
) -> Result<Vec<LocationTarget>> {
    if assignment.labels.len() != predicted_boxes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} assignment labels vs {} predicted boxes",
            assignment.labels.len(),
            predicted_boxes.len()
        )));
    }
    assignment
        .labels
        .iter()
        .zip(predicted_boxes)
        .map(|(label, pred)| {
            let mut target = vec![0.0; num_classes];
            match label {
                None => Ok(LocationTarget {
                    target,
                    gt_box: None,
                    q_weight: 0.0,
                }),
                Some(a) => {
                    let gt = gts.get(a.gt_index).ok_or_else(|| {
                        Error::ShapeMismatch(format!("gt index {} out of range", a.gt_index))
                    })?;
                    if a.class_id >= num_classes {
                        return Err(Error::ClassOutOfRange {
                            class_id: a.class_id,
                            num_classes,
                        });
                    }
                    let q = iou(pred, &gt.bbox);
                    target[a.class_id] = q;
                    Ok(LocationTarget {
                        target,
                        gt_box: Some(gt.bbox),
                        q_weight: q,
                    })
                }
            }
        })
        .collect()
}
