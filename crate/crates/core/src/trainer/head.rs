//! A per-location detection head with star-point feature aggregation and
//! hand-derived backprop.
//!
//! For a location with feature `f` on its own level:
//!
//! ```text
//! h   = relu(Wt f + bt)
//! d0  = exp(Wb h + bb)                  initial (l, t, r, b)
//! g   = relu(sum_k Mk sample(star_k(d0)) + bg)
//! s   = exp(Wr g + br)                  refinement scales (1 when disabled)
//! d   = d0 * s                          refined distances
//! p   = sigmoid(Wc g + bc)              class scores
//! ctr = sigmoid(wo . h + bo)            optional centerness branch
//! ```
//!
//! Exponent arguments are clamped to `[-LOG_CLAMP, LOG_CLAMP]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assigner::{GridSpec, Location};
use crate::error::{Error, Result};
use crate::geometry::{
    decode_distances, star_points, BBox, DistanceVector, RefineScales, STAR_OFFSETS,
    STAR_POINT_COUNT,
};
use crate::trainer::features::{bilinear_sample_into, FeatureGrid};

pub const LOG_CLAMP: f64 = 8.0;
pub const INIT_WEIGHT_RANGE: f64 = 0.1;
/// Initial classifier probability.
pub const PRIOR_PROB: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    /// When false the refinement scales are pinned to 1.
    pub refine: bool,
    /// Adds a centerness branch on the box tower.
    pub ctr_branch: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            hidden: 8,
            num_classes: 3,
            refine: true,
            ctr_branch: false,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 || self.num_classes == 0 {
            return Err(Error::Config("head: dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Offsets of each weight block in the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layout {
    wt: usize,
    bt: usize,
    wb: usize,
    bb: usize,
    mix: usize,
    bg: usize,
    wr: usize,
    br: usize,
    wc: usize,
    bc: usize,
    wo: usize,
    bo: usize,
    len: usize,
}

impl Layout {
    fn new(c: &HeadConfig) -> Self {
        let (d, h, k) = (c.feature_dim, c.hidden, c.num_classes);
        let ctr = usize::from(c.ctr_branch);
        let wt = 0;
        let bt = wt + h * d;
        let wb = bt + h;
        let bb = wb + 4 * h;
        let mix = bb + 4;
        let bg = mix + STAR_POINT_COUNT * h * d;
        let wr = bg + h;
        let br = wr + 4 * h;
        let wc = br + 4;
        let bc = wc + k * h;
        let wo = bc + k;
        let bo = wo + ctr * h;
        let len = bo + ctr;
        Self {
            wt,
            bt,
            wb,
            bb,
            mix,
            bg,
            wr,
            br,
            wc,
            bc,
            wo,
            bo,
            len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroHead {
    pub config: HeadConfig,
    pub params: Vec<f64>,
}

/// Head output at one location.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub location: Location,
    pub scores: Vec<f64>,
    pub initial: DistanceVector,
    pub scales: RefineScales,
    pub refined: DistanceVector,
    pub ctr: Option<f64>,
}

impl HeadOutput {
    pub fn initial_box(&self) -> BBox {
        decode_distances(self.location.point, &self.initial)
    }

    pub fn refined_box(&self) -> BBox {
        decode_distances(self.location.point, &self.refined)
    }
}

/// Upstream gradient for one location.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputGrad {
    pub d_scores: Vec<f64>,
    pub d_initial_box: [f64; 4],
    pub d_refined_box: [f64; 4],
    pub d_ctr: f64,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    level: usize,
    cell: usize,
    zt: Vec<f64>,
    h: Vec<f64>,
    u_live: [bool; 4],
    phi: Vec<f64>,
    phi_dx: Vec<f64>,
    phi_dy: Vec<f64>,
    zg: Vec<f64>,
    g: Vec<f64>,
    v_live: [bool; 4],
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamped_exp(x: f64) -> (f64, bool) {
    let live = x > -LOG_CLAMP && x < LOG_CLAMP;
    (x.clamp(-LOG_CLAMP, LOG_CLAMP).exp(), live)
}

/// `out = W x + b` for a row-major `out.len() x x.len()` matrix.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    for ((o, row), bi) in out.iter_mut().zip(w.chunks_exact(x.len())).zip(b) {
        *o = bi + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

/// Accumulates `dW += dy x^T`, `db += dy` and `dx += W^T dy`.
fn affine_backward(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64], dx: Option<&mut [f64]>) {
    let n = x.len();
    for (i, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        db[i] += g;
        for (d, xi) in dw[i * n..(i + 1) * n].iter_mut().zip(x) {
            *d += g * xi;
        }
    }
    if let Some(dx) = dx {
        for (i, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, wi) in dx.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                *d += g * wi;
            }
        }
    }
}

/// Box-coordinate gradient `(x1, y1, x2, y2)` to distance gradient `(l, t, r, b)`.
fn box_to_dist_grad(g: &[f64; 4]) -> [f64; 4] {
    [-g[0], -g[1], g[2], g[3]]
}

impl MicroHead {
    /// All weights and biases zero.
    pub fn zeros(config: HeadConfig) -> Result<Self> {
        config.validate()?;
        let len = Layout::new(&config).len;
        Ok(Self {
            config,
            params: vec![0.0; len],
        })
    }

    /// Uniform weights in `[-INIT_WEIGHT_RANGE, INIT_WEIGHT_RANGE]`, classifier
    /// bias at the logit of `PRIOR_PROB`, box bias at `ln(box_scale)`.
    pub fn init<R: Rng + ?Sized>(config: HeadConfig, rng: &mut R, box_scale: f64) -> Result<Self> {
        if !(box_scale > 0.0 && box_scale.is_finite()) {
            return Err(Error::invalid("box_scale", "must be positive and finite"));
        }
        let mut head = Self::zeros(config)?;
        let l = Layout::new(&config);
        for (i, w) in head.params.iter_mut().enumerate() {
            let is_bias = (l.bt..l.wb).contains(&i)
                || (l.bb..l.mix).contains(&i)
                || (l.bg..l.wr).contains(&i)
                || (l.br..l.wc).contains(&i)
                || (l.bc..l.wo).contains(&i)
                || (l.bo..l.len).contains(&i);
            *w = if is_bias {
                0.0
            } else {
                rng.random_range(-INIT_WEIGHT_RANGE..=INIT_WEIGHT_RANGE)
            };
        }
        let prior = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        head.params[l.bc..l.wo].fill(prior);
        head.params[l.bb..l.mix].fill(box_scale.ln());
        Ok(head)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    fn check(&self, grid: &GridSpec, feats: &FeatureGrid) -> Result<()> {
        if self.params.len() != self.layout().len {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, layout needs {}",
                self.params.len(),
                self.layout().len
            )));
        }
        if feats.dim != self.config.feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "feature dim {} vs head dim {}",
                feats.dim, self.config.feature_dim
            )));
        }
        if feats.levels.len() != grid.levels.len()
            || feats
                .levels
                .iter()
                .zip(&grid.levels)
                .any(|(f, g)| f.stride != g.stride || f.height != g.height || f.width != g.width)
        {
            return Err(Error::ShapeMismatch("feature grid does not match grid spec".into()));
        }
        Ok(())
    }

    /// Outputs at every location of `grid`, in `GridSpec::locations` order.
    pub fn forward(&self, grid: &GridSpec, feats: &FeatureGrid) -> Result<Vec<HeadOutput>> {
        Ok(self.forward_cached(grid, feats)?.into_iter().map(|(o, _)| o).collect())
    }

    pub fn forward_cached(&self, grid: &GridSpec, feats: &FeatureGrid) -> Result<Vec<(HeadOutput, ForwardCache)>> {
        self.check(grid, feats)?;
        Ok(grid
            .locations()
            .into_iter()
            .map(|loc| self.forward_location(loc, feats))
            .collect())
    }

    fn forward_location(&self, loc: Location, feats: &FeatureGrid) -> (HeadOutput, ForwardCache) {
        let c = &self.config;
        let l = self.layout();
        let w = &self.params;
        let (dim, hid) = (c.feature_dim, c.hidden);
        let level = &feats.levels[loc.level];
        let cell = loc.row * level.width + loc.col;
        let f = level.cell(loc.row, loc.col);

        let mut zt = vec![0.0; hid];
        affine(&w[l.wt..l.bt], &w[l.bt..l.wb], f, &mut zt);
        let h: Vec<f64> = zt.iter().map(|&z| relu(z)).collect();

        let mut u = [0.0; 4];
        affine(&w[l.wb..l.bb], &w[l.bb..l.mix], &h, &mut u);
        let mut d0 = [0.0; 4];
        let mut u_live = [false; 4];
        for j in 0..4 {
            (d0[j], u_live[j]) = clamped_exp(u[j]);
        }
        let initial = DistanceVector::from_array(d0);
        let star = star_points(loc.point, &initial).0;

        let mut phi = vec![0.0; STAR_POINT_COUNT * dim];
        let mut phi_dx = vec![0.0; STAR_POINT_COUNT * dim];
        let mut phi_dy = vec![0.0; STAR_POINT_COUNT * dim];
        let mut zg = w[l.bg..l.wr].to_vec();
        for k in 0..STAR_POINT_COUNT {
            let r = k * dim..(k + 1) * dim;
            let (dx, dy) = (&mut phi_dx[r.clone()], &mut phi_dy[r.clone()]);
            bilinear_sample_into(level, star[k], &mut phi[r.clone()], Some((dx, dy)));
            let block = &w[l.mix + k * hid * dim..l.mix + (k + 1) * hid * dim];
            for (z, row) in zg.iter_mut().zip(block.chunks_exact(dim)) {
                *z += row.iter().zip(&phi[r.clone()]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let g: Vec<f64> = zg.iter().map(|&z| relu(z)).collect();

        let mut s = [1.0; 4];
        let mut v_live = [false; 4];
        if c.refine {
            let mut v = [0.0; 4];
            affine(&w[l.wr..l.br], &w[l.br..l.wc], &g, &mut v);
            for j in 0..4 {
                (s[j], v_live[j]) = clamped_exp(v[j]);
            }
        }
        let scales = RefineScales::from_array(s);
        let refined = DistanceVector::from_array([d0[0] * s[0], d0[1] * s[1], d0[2] * s[2], d0[3] * s[3]]);

        let mut zc = vec![0.0; c.num_classes];
        affine(&w[l.wc..l.bc], &w[l.bc..l.wo], &g, &mut zc);
        let scores = zc.iter().map(|&z| sigmoid(z)).collect();

        let ctr = c.ctr_branch.then(|| {
            let z = w[l.bo] + w[l.wo..l.bo].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
            sigmoid(z)
        });

        (
            HeadOutput {
                location: loc,
                scores,
                initial,
                scales,
                refined,
                ctr,
            },
            ForwardCache {
                level: loc.level,
                cell,
                zt,
                h,
                u_live,
                phi,
                phi_dx,
                phi_dy,
                zg,
                g,
                v_live,
            },
        )
    }

    /// Accumulates the parameter gradient of one location into `acc`.
    pub fn backward(
        &self,
        feats: &FeatureGrid,
        out: &HeadOutput,
        cache: &ForwardCache,
        grad: &OutputGrad,
        acc: &mut [f64],
    ) -> Result<()> {
        let c = &self.config;
        let l = self.layout();
        if acc.len() != l.len || grad.d_scores.len() != c.num_classes {
            return Err(Error::ShapeMismatch("gradient buffer or score gradient shape".into()));
        }
        let w = &self.params;
        let (dim, hid) = (c.feature_dim, c.hidden);
        let level = &feats.levels[cache.level];
        let f = &level.data[cache.cell * dim..(cache.cell + 1) * dim];
        let d0 = out.initial.to_array();
        let s = out.scales.to_array();

        let dd = box_to_dist_grad(&grad.d_refined_box);
        let mut dd0 = box_to_dist_grad(&grad.d_initial_box);
        let mut dv = [0.0; 4];
        for j in 0..4 {
            dd0[j] += dd[j] * s[j];
            if c.refine && cache.v_live[j] {
                dv[j] = dd[j] * d0[j] * s[j];
            }
        }

        let dzc: Vec<f64> = out
            .scores
            .iter()
            .zip(&grad.d_scores)
            .map(|(p, g)| g * p * (1.0 - p))
            .collect();
        let mut dg = vec![0.0; hid];
        {
            let (head, tail) = acc.split_at_mut(l.br);
            let (dwr, _) = head[l.wr..].split_at_mut(4 * hid);
            let dbr = &mut tail[..4];
            if c.refine {
                affine_backward(&w[l.wr..l.br], &cache.g, &dv, dwr, dbr, Some(&mut dg));
            }
        }
        {
            let (head, tail) = acc.split_at_mut(l.bc);
            affine_backward(
                &w[l.wc..l.bc],
                &cache.g,
                &dzc,
                &mut head[l.wc..],
                &mut tail[..c.num_classes],
                Some(&mut dg),
            );
        }
        let dzg: Vec<f64> = dg
            .iter()
            .zip(&cache.zg)
            .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
            .collect();
        for (a, g) in acc[l.bg..l.wr].iter_mut().zip(&dzg) {
            *a += g;
        }
        for k in 0..STAR_POINT_COUNT {
            let r = k * dim..(k + 1) * dim;
            let base = l.mix + k * hid * dim;
            let mut dphi = vec![0.0; dim];
            for (i, &g) in dzg.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = base + i * dim;
                for j in 0..dim {
                    acc[row + j] += g * cache.phi[r.start + j];
                    dphi[j] += g * w[row + j];
                }
            }
            let px: f64 = dphi.iter().zip(&cache.phi_dx[r.clone()]).map(|(a, b)| a * b).sum();
            let py: f64 = dphi.iter().zip(&cache.phi_dy[r.clone()]).map(|(a, b)| a * b).sum();
            let (sx, sy) = STAR_OFFSETS[k];
            dd0[0] += px * sx[0];
            dd0[2] += px * sx[1];
            dd0[1] += py * sy[0];
            dd0[3] += py * sy[1];
        }

        let mut du = [0.0; 4];
        for j in 0..4 {
            if cache.u_live[j] {
                du[j] = dd0[j] * d0[j];
            }
        }
        let mut dh = vec![0.0; hid];
        {
            let (head, tail) = acc.split_at_mut(l.bb);
            affine_backward(&w[l.wb..l.bb], &cache.h, &du, &mut head[l.wb..], &mut tail[..4], Some(&mut dh));
        }
        if let Some(o) = out.ctr {
            let dzo = grad.d_ctr * o * (1.0 - o);
            if dzo != 0.0 {
                for i in 0..hid {
                    acc[l.wo + i] += dzo * cache.h[i];
                    dh[i] += dzo * w[l.wo + i];
                }
                acc[l.bo] += dzo;
            }
        }
        let dzt: Vec<f64> = dh
            .iter()
            .zip(&cache.zt)
            .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
            .collect();
        {
            let (head, tail) = acc.split_at_mut(l.bt);
            affine_backward(&w[l.wt..l.bt], f, &dzt, &mut head[l.wt..], &mut tail[..hid], None);
        }
        Ok(())
    }

    /// Parameters pinned by the configuration (refinement weights when
    /// refinement is disabled); they never receive gradient.
    pub fn frozen_mask(&self) -> Vec<bool> {
        let l = self.layout();
        (0..l.len)
            .map(|i| !self.config.refine && (l.wr..l.wc).contains(&i))
            .collect()
    }
}
