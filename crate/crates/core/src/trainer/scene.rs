use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assigner::GtObject;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Bounds for synthetic scene sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: f64,
    pub height: f64,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub signal_min: f64,
    pub signal_max: f64,
    /// Standard deviation of the noise added to every feature channel.
    pub noise: f64,
    /// Extra noise on the distance channels; drives box-quality spread.
    pub offset_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64.0,
            height: 64.0,
            num_classes: 3,
            min_objects: 1,
            max_objects: 3,
            min_size: 12.0,
            max_size: 40.0,
            signal_min: 0.3,
            signal_max: 1.0,
            noise: 0.25,
            offset_noise: 0.15,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if !(self.width > 0.0 && self.height > 0.0) {
            return bad("extent must be positive");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad("object sizes must satisfy 0 < min_size <= max_size");
        }
        if self.min_size > self.width.min(self.height) {
            return bad("min_size does not fit in the extent");
        }
        if !(self.signal_min >= 0.0 && self.signal_min <= self.signal_max) {
            return bad("signal range must satisfy 0 <= signal_min <= signal_max");
        }
        if !(self.noise >= 0.0 && self.offset_noise >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        Ok(())
    }

    /// Mean half-extent of a sampled object, a natural scale for box outputs.
    pub fn typical_half_size(&self) -> f64 {
        0.25 * (self.min_size + self.max_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub gt: GtObject,
    /// Peak strength of the object's class channel.
    pub signal: f64,
}

/// Ground truth and feature-field parameters of one synthetic image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub width: f64,
    pub height: f64,
    pub objects: Vec<SceneObject>,
    pub noise: f64,
    pub offset_noise: f64,
    /// Seed of the per-location feature noise.
    pub noise_seed: u64,
}

impl SceneRecord {
    pub fn gts(&self) -> Vec<GtObject> {
        self.objects.iter().map(|o| o.gt).collect()
    }
}

/// Samples object count, classes, sizes, positions and signal strengths
/// uniformly within `spec`.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, spec: &SceneSpec) -> SceneRecord {
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let objects = (0..count)
        .map(|_| {
            let class_id = rng.random_range(0..spec.num_classes);
            let w = rng.random_range(spec.min_size..=spec.max_size).min(spec.width);
            let h = rng.random_range(spec.min_size..=spec.max_size).min(spec.height);
            let x1 = rng.random_range(0.0..=spec.width - w);
            let y1 = rng.random_range(0.0..=spec.height - h);
            let signal = rng.random_range(spec.signal_min..=spec.signal_max);
            SceneObject {
                gt: GtObject {
                    bbox: BBox {
                        x1,
                        y1,
                        x2: x1 + w,
                        y2: y1 + h,
                    },
                    class_id,
                },
                signal,
            }
        })
        .collect();
    SceneRecord {
        width: spec.width,
        height: spec.height,
        objects,
        noise: spec.noise,
        offset_noise: spec.offset_noise,
        noise_seed: rng.next_u64(),
    }
}
