//! Rendered feature maps standing in for a backbone, plus bilinear sampling
//! and star-point aggregation over them.
//!
//! Channel layout for `C` classes (the remaining channels carry noise only):
//!
//! | channels        | content                                                     |
//! |-----------------|-------------------------------------------------------------|
//! | `0..C`          | class presence: signal of the deepest containing object      |
//! | `C..C+4`        | `ln(max(d, 1)) / DIST_LOG_SCALE` for `d` in `(l, t, r, b)`   |
//! | `C+4`, `C+5`    | `tanh(s / EDGE_SCALE)` of the signed x / y margin to the box |
//! | `C+6`           | `exp(-e^2 / (2 EDGE_SCALE^2))`, `e` distance to the outline   |
//! | `C+7`           | signal if inside the reference object, else 0                |
//! | `C+8`           | constant 1                                                   |
//!
//! The reference object of a point is the smallest object containing it, or
//! the nearest object when none does.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::assigner::GridSpec;
use crate::error::{Error, Result};
use crate::geometry::{encode_distances, BBox, Point, StarPoints, STAR_POINT_COUNT};
use crate::trainer::scene::SceneRecord;

pub const DIST_LOG_SCALE: f64 = 1.0;
pub const EDGE_SCALE: f64 = 4.0;
pub const DEFAULT_FEATURE_DIM: usize = 16;

/// Number of structured channels for `num_classes` classes.
pub fn structured_channels(num_classes: usize) -> usize {
    num_classes + 9
}

pub fn dist_channel(num_classes: usize) -> usize {
    num_classes
}

/// One pyramid level of features, row-major `height x width x dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelFeatures {
    pub stride: u32,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl LevelFeatures {
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.dim;
        &self.data[i..i + self.dim]
    }

    /// Continuous grid coordinates of an image-space point.
    pub fn to_grid(&self, p: Point) -> (f64, f64) {
        let s = self.stride as f64;
        (p.x / s - 0.5, p.y / s - 0.5)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub dim: usize,
    pub levels: Vec<LevelFeatures>,
}

fn reference_object(scene: &SceneRecord, p: Point) -> Option<usize> {
    let inside = scene
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.gt.bbox.contains(p))
        .min_by(|a, b| a.1.gt.bbox.area().total_cmp(&b.1.gt.bbox.area()))
        .map(|(i, _)| i);
    inside.or_else(|| {
        scene
            .objects
            .iter()
            .enumerate()
            .min_by(|a, b| {
                outside_distance(&a.1.gt.bbox, p).total_cmp(&outside_distance(&b.1.gt.bbox, p))
            })
            .map(|(i, _)| i)
    })
}

fn outside_distance(b: &BBox, p: Point) -> f64 {
    let dx = (b.x1 - p.x).max(p.x - b.x2).max(0.0);
    let dy = (b.y1 - p.y).max(p.y - b.y2).max(0.0);
    dx.hypot(dy)
}

/// Noise-free features of a single image-space point.
pub fn clean_features(scene: &SceneRecord, p: Point, num_classes: usize, dim: usize) -> Vec<f64> {
    let mut f = vec![0.0f64; dim];
    for o in &scene.objects {
        if o.gt.bbox.contains(p) && o.gt.class_id < num_classes {
            let c = o.gt.class_id;
            f[c] = f[c].max(o.signal);
        }
    }
    let dc = dist_channel(num_classes);
    match reference_object(scene, p) {
        Some(i) => {
            let o = &scene.objects[i];
            let b = o.gt.bbox;
            if let Ok(d) = encode_distances(p, &b) {
                for (k, v) in d.to_array().iter().enumerate() {
                    f[dc + k] = v.max(1.0).ln() / DIST_LOG_SCALE;
                }
            }
            let sx = (p.x - b.x1).min(b.x2 - p.x);
            let sy = (p.y - b.y1).min(b.y2 - p.y);
            f[dc + 4] = (sx / EDGE_SCALE).tanh();
            f[dc + 5] = (sy / EDGE_SCALE).tanh();
            let e = if b.contains(p) {
                sx.min(sy)
            } else {
                outside_distance(&b, p)
            };
            f[dc + 6] = (-(e * e) / (2.0 * EDGE_SCALE * EDGE_SCALE)).exp();
            f[dc + 7] = if b.contains(p) { o.signal } else { 0.0 };
        }
        None => {
            f[dc + 4] = -1.0;
            f[dc + 5] = -1.0;
        }
    }
    f[dc + 8] = 1.0;
    f
}

/// Renders a scene onto every level of `grid`, sampling features at location
/// centers and adding seeded Gaussian noise.
pub fn render_features(
    scene: &SceneRecord,
    grid: &GridSpec,
    num_classes: usize,
    dim: usize,
) -> Result<FeatureGrid> {
    if dim < structured_channels(num_classes) {
        return Err(Error::Config(format!(
            "feature dim {dim} is below the {} structured channels",
            structured_channels(num_classes)
        )));
    }
    let noise = Normal::new(0.0, scene.noise.max(0.0))
        .map_err(|e| Error::invalid("scene noise", e.to_string()))?;
    let offset_noise = Normal::new(0.0, scene.offset_noise.max(0.0))
        .map_err(|e| Error::invalid("scene offset noise", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
    let dc = dist_channel(num_classes);
    let constant = dc + 8;

    let levels = grid
        .levels
        .iter()
        .map(|lv| {
            let s = lv.stride as f64;
            let mut data = Vec::with_capacity(lv.height * lv.width * dim);
            for row in 0..lv.height {
                for col in 0..lv.width {
                    let p = Point::new((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
                    let mut f = clean_features(scene, p, num_classes, dim);
                    for (k, v) in f.iter_mut().enumerate() {
                        if k == constant {
                            continue;
                        }
                        if scene.noise > 0.0 {
                            *v += noise.sample(&mut rng);
                        }
                        if (dc..dc + 4).contains(&k) && scene.offset_noise > 0.0 {
                            *v += offset_noise.sample(&mut rng);
                        }
                    }
                    data.extend(f);
                }
            }
            LevelFeatures {
                stride: lv.stride,
                height: lv.height,
                width: lv.width,
                dim,
                data,
            }
        })
        .collect();
    Ok(FeatureGrid { dim, levels })
}

/// Interpolation corners along one axis: `(i0, i1, frac, in_range)`.
fn axis(g: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    let inside = g > 0.0 && g < max;
    let c = g.clamp(0.0, max);
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64, inside)
}

/// Bilinear interpolation at an image-space point. Coordinates outside the
/// grid are clamped to the border cells.
pub fn bilinear_sample(level: &LevelFeatures, p: Point) -> Vec<f64> {
    let mut out = vec![0.0; level.dim];
    bilinear_sample_into(level, p, &mut out, None);
    out
}

/// Bilinear sample together with its derivatives with respect to the
/// image-space `x` and `y` of the point. The derivative along a clamped axis
/// is zero.
pub fn bilinear_sample_with_grad(level: &LevelFeatures, p: Point) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = level.dim;
    let mut v = vec![0.0; d];
    let mut gx = vec![0.0; d];
    let mut gy = vec![0.0; d];
    bilinear_sample_into(level, p, &mut v, Some((&mut gx, &mut gy)));
    (v, gx, gy)
}

pub(crate) fn bilinear_sample_into(
    level: &LevelFeatures,
    p: Point,
    out: &mut [f64],
    grads: Option<(&mut [f64], &mut [f64])>,
) {
    let (gxf, gyf) = level.to_grid(p);
    let (c0, c1, fx, x_in) = axis(gxf, level.width);
    let (r0, r1, fy, y_in) = axis(gyf, level.height);
    let f00 = level.cell(r0, c0);
    let f01 = level.cell(r0, c1);
    let f10 = level.cell(r1, c0);
    let f11 = level.cell(r1, c1);
    let w00 = (1.0 - fx) * (1.0 - fy);
    let w01 = fx * (1.0 - fy);
    let w10 = (1.0 - fx) * fy;
    let w11 = fx * fy;
    for k in 0..level.dim {
        out[k] = w00 * f00[k] + w01 * f01[k] + w10 * f10[k] + w11 * f11[k];
    }
    if let Some((dx, dy)) = grads {
        let inv_s = 1.0 / level.stride as f64;
        let sx = if x_in { inv_s } else { 0.0 };
        let sy = if y_in { inv_s } else { 0.0 };
        for k in 0..level.dim {
            dx[k] = sx * ((1.0 - fy) * (f01[k] - f00[k]) + fy * (f11[k] - f10[k]));
            dy[k] = sy * ((1.0 - fx) * (f10[k] - f00[k]) + fx * (f11[k] - f01[k]));
        }
    }
}

/// `sum_k M_k * sample(p_k)` over the nine star points, with `mix` holding
/// nine row-major `out_dim x dim` blocks.
pub fn star_aggregate(level: &LevelFeatures, star: &StarPoints, mix: &[f64], out_dim: usize) -> Vec<f64> {
    let d = level.dim;
    assert_eq!(mix.len(), STAR_POINT_COUNT * out_dim * d, "mix weight shape");
    let mut out = vec![0.0; out_dim];
    let mut s = vec![0.0; d];
    for (k, p) in star.as_slice().iter().enumerate() {
        bilinear_sample_into(level, *p, &mut s, None);
        let block = &mix[k * out_dim * d..(k + 1) * out_dim * d];
        for (o, row) in out.iter_mut().zip(block.chunks_exact(d)) {
            *o += row.iter().zip(&s).map(|(w, x)| w * x).sum::<f64>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assigner::GtObject;
    use crate::geometry::{star_points, DistanceVector};
    use crate::trainer::scene::SceneObject;

    fn level(w: usize, h: usize, dim: usize, f: impl Fn(usize, usize, usize) -> f64) -> LevelFeatures {
        let mut data = Vec::new();
        for r in 0..h {
            for c in 0..w {
                for k in 0..dim {
                    data.push(f(r, c, k));
                }
            }
        }
        LevelFeatures {
            stride: 8,
            height: h,
            width: w,
            dim,
            data,
        }
    }

    fn scene(objects: Vec<SceneObject>, noise: f64) -> SceneRecord {
        SceneRecord {
            width: 64.0,
            height: 64.0,
            objects,
            noise,
            offset_noise: noise,
            noise_seed: 3,
        }
    }

    fn obj(b: [f64; 4], c: usize, signal: f64) -> SceneObject {
        SceneObject {
            gt: GtObject {
                bbox: BBox::from_array(b),
                class_id: c,
            },
            signal,
        }
    }

    #[test]
    fn sample_at_cell_centers_and_midpoints() {
        let lv = level(4, 3, 2, |r, c, k| (r * 10 + c) as f64 + k as f64 * 0.5);
        assert_eq!(bilinear_sample(&lv, Point::new(2.5 * 8.0, 1.5 * 8.0)), lv.cell(1, 2));
        let mid = bilinear_sample(&lv, Point::new(2.0 * 8.0, 0.5 * 8.0));
        assert_eq!(mid, vec![1.5, 2.0]);
        // Clamped outside the grid.
        assert_eq!(bilinear_sample(&lv, Point::new(-100.0, -100.0)), lv.cell(0, 0));
    }

    #[test]
    fn sample_gradient_matches_finite_differences() {
        let lv = level(5, 5, 3, |r, c, k| ((r * 7 + c * 3 + k) as f64 * 0.37).sin());
        let h = 1e-6;
        for p in [Point::new(13.3, 21.7), Point::new(30.1, 9.9), Point::new(5.2, 33.3)] {
            let (_, gx, gy) = bilinear_sample_with_grad(&lv, p);
            let fx = |dx: f64, dy: f64| bilinear_sample(&lv, Point::new(p.x + dx, p.y + dy));
            for k in 0..3 {
                let nx = (fx(h, 0.0)[k] - fx(-h, 0.0)[k]) / (2.0 * h);
                let ny = (fx(0.0, h)[k] - fx(0.0, -h)[k]) / (2.0 * h);
                assert!((nx - gx[k]).abs() < 1e-7, "{nx} vs {}", gx[k]);
                assert!((ny - gy[k]).abs() < 1e-7, "{ny} vs {}", gy[k]);
            }
        }
    }

    #[test]
    fn star_aggregate_identity_and_uniform() {
        let dim = 3;
        let lv = level(6, 6, dim, |r, c, k| (r + 2 * c + k) as f64);
        let anchor = Point::new(20.0, 22.0);
        let star = star_points(anchor, &DistanceVector::new(5.0, 6.0, 7.0, 8.0).unwrap());
        let mut mix = vec![0.0; 9 * dim * dim];
        for i in 0..dim {
            mix[i * dim + i] = 1.0;
        }
        assert_eq!(star_aggregate(&lv, &star, &mix, dim), bilinear_sample(&lv, anchor));

        let flat = level(6, 6, dim, |_, _, _| 2.5);
        let uniform = vec![1.0 / 27.0; 9 * dim * dim];
        for v in star_aggregate(&flat, &star, &uniform, dim) {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_scene_is_pure_background() {
        let grid = GridSpec::for_image(64.0, 64.0, &[8]).unwrap();
        let fg = render_features(&scene(vec![], 0.0), &grid, 3, 16).unwrap();
        let first = fg.levels[0].cell(0, 0).to_vec();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(fg.levels[0].cell(r, c), first.as_slice());
            }
        }
        assert_eq!(first[3 + 8], 1.0);
        assert!(first[..3].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn object_center_carries_full_signal() {
        let s = scene(vec![obj([8.0, 8.0, 40.0, 40.0], 1, 0.7)], 0.0);
        let f = clean_features(&s, Point::new(24.0, 24.0), 3, 16);
        assert_eq!(f[1], 0.7);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[3 + 7], 0.7);
    }

    #[test]
    fn distance_channels_encode_offsets() {
        let b = [4.0, 10.0, 60.0, 50.0];
        let s = scene(vec![obj(b, 0, 1.0)], 0.0);
        let grid = GridSpec::for_image(64.0, 64.0, &[8]).unwrap();
        let fg = render_features(&s, &grid, 3, 16).unwrap();
        let p = Point::new(20.0, 28.0);
        let d = encode_distances(p, &BBox::from_array(b)).unwrap();
        let f = fg.levels[0].cell(3, 2);
        for (k, v) in d.to_array().iter().enumerate() {
            assert!((f[3 + k] * DIST_LOG_SCALE).exp() - v < 1e-12);
            assert!((f[3 + k] - v.ln() / DIST_LOG_SCALE).abs() < 1e-12);
        }
    }

    #[test]
    fn render_is_deterministic_and_rejects_small_dim() {
        let s = scene(vec![obj([8.0, 8.0, 40.0, 40.0], 1, 0.7)], 0.3);
        let grid = GridSpec::for_image(64.0, 64.0, &[4, 8]).unwrap();
        assert_eq!(
            render_features(&s, &grid, 3, 16).unwrap(),
            render_features(&s, &grid, 3, 16).unwrap()
        );
        assert!(render_features(&s, &grid, 3, 11).is_err());
    }
}
