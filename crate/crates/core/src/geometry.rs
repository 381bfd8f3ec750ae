//! Box representations and the arithmetic shared by assignment, losses,
//! ranking and evaluation.
//!
//! Boxes are continuous corner-form rectangles `[x1, y1, x2, y2]`. There is no
//! pixel `+1` convention anywhere in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2D point in image units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned corner-form box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and inverted extents.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if finite && self.x1 <= self.x2 && self.y1 <= self.y2 {
            Ok(())
        } else {
            Err(Error::InvalidBox {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
            })
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Closed containment test.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    /// Open containment test: the point is strictly inside on both axes.
    pub fn contains_strictly(&self, p: Point) -> bool {
        p.x > self.x1 && p.x < self.x2 && p.y > self.y1 && p.y < self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            x1: a[0],
            y1: a[1],
            x2: a[2],
            y2: a[3],
        }
    }
}

/// Per-location `(l, t, r, b)` distances from an anchor point to the four box sides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceVector {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl DistanceVector {
    pub fn new(l: f64, t: f64, r: f64, b: f64) -> Result<Self> {
        let d = Self { l, t, r, b };
        if d.to_array().iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(d)
        } else {
            Err(Error::invalid(
                "distance vector",
                format!("components must be finite and non-negative, got {:?}", d.to_array()),
            ))
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.l, self.t, self.r, self.b]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            l: a[0],
            t: a[1],
            r: a[2],
            b: a[3],
        }
    }
}

/// Multiplicative per-side refinement factors `(dl, dt, dr, db)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineScales {
    pub dl: f64,
    pub dt: f64,
    pub dr: f64,
    pub db: f64,
}

impl Default for RefineScales {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RefineScales {
    pub const IDENTITY: Self = Self {
        dl: 1.0,
        dt: 1.0,
        dr: 1.0,
        db: 1.0,
    };

    pub fn new(dl: f64, dt: f64, dr: f64, db: f64) -> Result<Self> {
        let s = Self { dl, dt, dr, db };
        if s.to_array().iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(s)
        } else {
            Err(Error::invalid(
                "refine scales",
                format!("components must be finite and positive, got {:?}", s.to_array()),
            ))
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dl, self.dt, self.dr, self.db]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            dl: a[0],
            dt: a[1],
            dr: a[2],
            db: a[3],
        }
    }

    /// Elementwise product, so that `refine(refine(d, a), b) == refine(d, a.compose(b))`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            dl: self.dl * other.dl,
            dt: self.dt * other.dt,
            dr: self.dr * other.dr,
            db: self.db * other.db,
        }
    }
}

pub const STAR_POINT_COUNT: usize = 9;

/// The nine star sampling points of a location: the anchor, the four side
/// projections and the four corners of the decoded box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StarPoints(pub [Point; STAR_POINT_COUNT]);

impl StarPoints {
    pub fn anchor(&self) -> Point {
        self.0[0]
    }

    pub fn as_slice(&self) -> &[Point] {
        &self.0
    }

    pub fn boundary(&self) -> &[Point] {
        &self.0[1..]
    }
}

/// Sign pattern of each star point relative to the anchor, as multipliers of
/// `(l, t, r, b)`: point `k` sits at `x + sx.0 * l + sx.1 * r`, `y + sy.0 * t + sy.1 * b`.
/// Shared with the trainer so that gradients through sampling positions stay
/// in lockstep with [`star_points`].
pub(crate) const STAR_OFFSETS: [([f64; 2], [f64; 2]); STAR_POINT_COUNT] = [
    ([0.0, 0.0], [0.0, 0.0]),
    ([-1.0, 0.0], [0.0, 0.0]),
    ([0.0, 0.0], [-1.0, 0.0]),
    ([0.0, 1.0], [0.0, 0.0]),
    ([0.0, 0.0], [0.0, 1.0]),
    ([-1.0, 0.0], [-1.0, 0.0]),
    ([0.0, 1.0], [-1.0, 0.0]),
    ([-1.0, 0.0], [0.0, 1.0]),
    ([0.0, 1.0], [0.0, 1.0]),
];

fn intersection_wh(a: &BBox, b: &BBox) -> (f64, f64) {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    (iw, ih)
}

fn hull(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

/// Intersection over union. Zero whenever the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (iw, ih) = intersection_wh(a, b);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU: `iou - (hull - union) / hull`. Zero when the hull is degenerate.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (iw, ih) = intersection_wh(a, b);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let hull_area = hull(a, b).area();
    if hull_area <= 0.0 {
        return 0.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (hull_area - union) / hull_area
}

/// `1 - giou(pred, gt)` together with its gradient with respect to
/// `[x1, y1, x2, y2]` of `pred`.
///
/// On the measure-zero set where a min/max switches branch the gradient is the
/// one-sided derivative that treats `gt` as the active argument.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let pw = pred.width();
    let ph = pred.height();
    let iw_raw = pred.x2.min(gt.x2) - pred.x1.max(gt.x1);
    let ih_raw = pred.y2.min(gt.y2) - pred.y1.max(gt.y1);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let union = pw * ph + gt.area() - inter;
    let h = hull(pred, gt);
    let cw = h.width();
    let ch = h.height();
    let hull_area = cw * ch;

    if hull_area <= 0.0 {
        return (1.0, [0.0; 4]);
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let loss = 1.0 - (iou - (hull_area - union) / hull_area);

    // d(pred area), d(iw), d(ih), d(cw), d(ch) per coordinate.
    let x_overlap = iw_raw > 0.0;
    let y_overlap = ih_raw > 0.0;
    let partials: [[f64; 5]; 4] = [
        [
            -ph,
            if x_overlap && pred.x1 > gt.x1 { -1.0 } else { 0.0 },
            0.0,
            if pred.x1 < gt.x1 { -1.0 } else { 0.0 },
            0.0,
        ],
        [
            -pw,
            0.0,
            if y_overlap && pred.y1 > gt.y1 { -1.0 } else { 0.0 },
            0.0,
            if pred.y1 < gt.y1 { -1.0 } else { 0.0 },
        ],
        [
            ph,
            if x_overlap && pred.x2 < gt.x2 { 1.0 } else { 0.0 },
            0.0,
            if pred.x2 > gt.x2 { 1.0 } else { 0.0 },
            0.0,
        ],
        [
            pw,
            0.0,
            if y_overlap && pred.y2 < gt.y2 { 1.0 } else { 0.0 },
            0.0,
            if pred.y2 > gt.y2 { 1.0 } else { 0.0 },
        ],
    ];

    let mut grad = [0.0; 4];
    for (g, [d_area, d_iw, d_ih, d_cw, d_ch]) in grad.iter_mut().zip(partials) {
        let d_inter = d_iw * ih + iw * d_ih;
        let d_union = d_area - d_inter;
        let d_hull = d_cw * ch + cw * d_ch;
        let d_iou = if union > 0.0 {
            (d_inter * union - inter * d_union) / (union * union)
        } else {
            0.0
        };
        // loss = 2 - iou - union / hull
        let d_ratio = (d_union * hull_area - union * d_hull) / (hull_area * hull_area);
        *g = -d_iou - d_ratio;
    }
    (loss, grad)
}

/// Box `[x - l, y - t, x + r, y + b]`.
pub fn decode_distances(point: Point, dv: &DistanceVector) -> BBox {
    BBox {
        x1: point.x - dv.l,
        y1: point.y - dv.t,
        x2: point.x + dv.r,
        y2: point.y + dv.b,
    }
}

/// Distances from `point` to the four sides of `bbox`. The point must lie in
/// the closed box.
pub fn encode_distances(point: Point, bbox: &BBox) -> Result<DistanceVector> {
    if !bbox.contains(point) {
        return Err(Error::PointOutsideBox {
            x: point.x,
            y: point.y,
        });
    }
    Ok(DistanceVector {
        l: point.x - bbox.x1,
        t: point.y - bbox.y1,
        r: bbox.x2 - point.x,
        b: bbox.y2 - point.y,
    })
}

/// Nine sampling points: `(x, y)`, `(x-l, y)`, `(x, y-t)`, `(x+r, y)`,
/// `(x, y+b)`, then the corners `(x-l, y-t)`, `(x+r, y-t)`, `(x-l, y+b)`,
/// `(x+r, y+b)`.
pub fn star_points(point: Point, dv: &DistanceVector) -> StarPoints {
    let mut pts = [point; STAR_POINT_COUNT];
    for (p, (sx, sy)) in pts.iter_mut().zip(STAR_OFFSETS) {
        p.x = point.x + sx[0] * dv.l + sx[1] * dv.r;
        p.y = point.y + sy[0] * dv.t + sy[1] * dv.b;
    }
    StarPoints(pts)
}

/// FCOS centerness of a distance vector:
/// `sqrt(min(l, r) / max(l, r) * min(t, b) / max(t, b))`, zero when degenerate.
pub fn centerness(dv: &DistanceVector) -> f64 {
    let lr = dv.l.max(dv.r);
    let tb = dv.t.max(dv.b);
    if lr <= 0.0 || tb <= 0.0 {
        return 0.0;
    }
    (dv.l.min(dv.r) / lr * (dv.t.min(dv.b) / tb)).sqrt()
}

/// Componentwise product of a distance vector and refinement scales.
pub fn refine(dv: &DistanceVector, s: &RefineScales) -> DistanceVector {
    DistanceVector {
        l: dv.l * s.dl,
        t: dv.t * s.dt,
        r: dv.r * s.dr,
        b: dv.b * s.db,
    }
}
