//! JSON dataset / detection dump.
//!
//! ```json
//! {
//!   "images":      [{"id": 0, "width": 64, "height": 64}],
//!   "annotations": [{"image_id": 0, "bbox": [x1, y1, x2, y2], "class_id": 1}],
//!   "detections":  [{"image_id": 0, "bbox": [x1, y1, x2, y2],
//!                    "class_id": 1, "score": 0.7}]
//! }
//! ```
//!
//! A detection carries either `class_id` + `score` (a final detection) or
//! `score_vector` (a raw per-location candidate). Candidates may also carry
//! `ctr`, `level`, `location` (`[x, y]`), `source_index` and `assigned_gt`
//! (index into the image's annotations, in file order). Boxes are corner form
//! unless read with the xywh flag.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::assigner::GtObject;
use crate::error::{Error, Result};
use crate::eval::{DetectionRecord, EvalImage};
use crate::geometry::{BBox, Point};
use crate::ranking::Candidate;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: u64,
    pub width: f64,
    pub height: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationEntry {
    pub image_id: u64,
    pub bbox: [f64; 4],
    pub class_id: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionEntry {
    pub image_id: u64,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_vector: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assigned_gt: Option<usize>,
}

impl DetectionEntry {
    pub fn is_candidate(&self) -> bool {
        self.score_vector.is_some()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
    #[serde(default)]
    pub detections: Vec<DetectionEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    images: Vec<Value>,
    annotations: Vec<Value>,
    #[serde(default)]
    detections: Vec<Value>,
}

fn schema(section: &'static str, index: usize, field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Schema {
        section,
        index,
        field: field.into(),
        reason: reason.into(),
    }
}

fn parse_records<T: for<'de> Deserialize<'de>>(section: &'static str, raw: Vec<Value>) -> Result<Vec<T>> {
    raw.into_iter()
        .enumerate()
        .map(|(i, v)| {
            serde_path_to_error::deserialize(v).map_err(|e| {
                let path = e.path().to_string();
                let field = if path == "." { "record".to_string() } else { path };
                let reason = e.into_inner().to_string();
                // Missing fields surface at the record level; name them.
                let field = match reason.split('`').nth(1) {
                    Some(f) if field == "record" && reason.starts_with("missing field") => f.to_string(),
                    _ => field,
                };
                schema(section, i, field, reason)
            })
        })
        .collect()
}

fn check_box(section: &'static str, index: usize, b: [f64; 4]) -> Result<BBox> {
    let bbox = BBox::from_array(b);
    bbox.validate()
        .map_err(|_| schema(section, index, "bbox", format!("{b:?} is not a finite box with x1 <= x2, y1 <= y2")))?;
    Ok(bbox)
}

fn xywh_to_corners(b: [f64; 4]) -> [f64; 4] {
    [b[0], b[1], b[0] + b[2], b[1] + b[3]]
}

fn prob(section: &'static str, index: usize, field: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(schema(section, index, field, format!("{v} is outside [0, 1]")))
    }
}

impl Dataset {
    /// Parses and validates a dump. With `xywh` boxes are converted to corners.
    pub fn from_json_str(s: &str, xywh: bool) -> Result<Self> {
        let raw: RawDataset = serde_json::from_str(s)?;
        let mut ds = Dataset {
            images: parse_records("images", raw.images)?,
            annotations: parse_records("annotations", raw.annotations)?,
            detections: parse_records("detections", raw.detections)?,
        };
        if xywh {
            ds.annotations.iter_mut().for_each(|a| a.bbox = xywh_to_corners(a.bbox));
            ds.detections.iter_mut().for_each(|d| d.bbox = xywh_to_corners(d.bbox));
        }
        ds.validate()?;
        Ok(ds)
    }

    pub fn load(path: &Path, xywh: bool) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s, xywh)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeMap::new();
        for (i, im) in self.images.iter().enumerate() {
            if !(im.width > 0.0 && im.width.is_finite()) {
                return Err(schema("images", i, "width", "must be positive"));
            }
            if !(im.height > 0.0 && im.height.is_finite()) {
                return Err(schema("images", i, "height", "must be positive"));
            }
            if ids.insert(im.id, 0usize).is_some() {
                return Err(schema("images", i, "id", format!("duplicate image id {}", im.id)));
            }
        }
        for (i, a) in self.annotations.iter().enumerate() {
            let Some(count) = ids.get_mut(&a.image_id) else {
                return Err(schema("annotations", i, "image_id", format!("unknown image {}", a.image_id)));
            };
            *count += 1;
            let b = check_box("annotations", i, a.bbox)?;
            if b.area() <= 0.0 {
                return Err(schema("annotations", i, "bbox", "ground-truth box has zero area"));
            }
        }
        for (i, d) in self.detections.iter().enumerate() {
            let Some(&n_ann) = ids.get(&d.image_id) else {
                return Err(schema("detections", i, "image_id", format!("unknown image {}", d.image_id)));
            };
            check_box("detections", i, d.bbox)?;
            match (&d.score_vector, d.class_id, d.score) {
                (Some(sv), None, None) => {
                    if sv.is_empty() {
                        return Err(schema("detections", i, "score_vector", "must not be empty"));
                    }
                    for &v in sv {
                        prob("detections", i, "score_vector", v)?;
                    }
                }
                (None, Some(_), Some(s)) => prob("detections", i, "score", s)?,
                (None, Some(_), None) => return Err(schema("detections", i, "score", "missing")),
                (None, None, _) => {
                    return Err(schema("detections", i, "class_id", "need class_id + score or score_vector"))
                }
                (Some(_), _, _) => {
                    return Err(schema(
                        "detections",
                        i,
                        "score_vector",
                        "cannot be combined with class_id or score",
                    ))
                }
            }
            if let Some(c) = d.ctr {
                prob("detections", i, "ctr", c)?;
            }
            if let Some(l) = d.location {
                if !(l[0].is_finite() && l[1].is_finite()) {
                    return Err(schema("detections", i, "location", "must be finite"));
                }
            }
            if let Some(g) = d.assigned_gt {
                if g >= n_ann {
                    return Err(schema(
                        "detections",
                        i,
                        "assigned_gt",
                        format!("image {} has only {n_ann} annotations", d.image_id),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Ground truth per image, in image order.
    pub fn eval_images(&self) -> Vec<EvalImage> {
        let mut by_id: BTreeMap<u64, Vec<GtObject>> = self.images.iter().map(|im| (im.id, Vec::new())).collect();
        for a in &self.annotations {
            if let Some(v) = by_id.get_mut(&a.image_id) {
                v.push(GtObject {
                    bbox: BBox::from_array(a.bbox),
                    class_id: a.class_id,
                });
            }
        }
        self.images
            .iter()
            .map(|im| EvalImage {
                image_id: im.id,
                gts: by_id[&im.id].clone(),
            })
            .collect()
    }

    /// Final detections (`class_id` + `score` records).
    pub fn detection_records(&self) -> Vec<DetectionRecord> {
        self.detections
            .iter()
            .filter_map(|d| {
                Some(DetectionRecord {
                    image_id: d.image_id,
                    bbox: BBox::from_array(d.bbox),
                    class_id: d.class_id?,
                    score: d.score?,
                })
            })
            .collect()
    }

    /// Candidate records grouped by image, with their ground-truth
    /// association. Missing `location` defaults to the box center, missing
    /// `source_index` to the record's position within its image.
    pub fn candidates(&self) -> BTreeMap<u64, (Vec<Candidate>, Vec<Option<usize>>)> {
        let mut out: BTreeMap<u64, (Vec<Candidate>, Vec<Option<usize>>)> = BTreeMap::new();
        for d in self.detections.iter().filter(|d| d.is_candidate()) {
            let e = out.entry(d.image_id).or_default();
            let bbox = BBox::from_array(d.bbox);
            e.0.push(Candidate {
                bbox,
                scores: d.score_vector.clone().unwrap_or_default(),
                level: d.level.unwrap_or(0),
                ctr: d.ctr,
                location: d.location.map(|l| Point::new(l[0], l[1])).unwrap_or_else(|| bbox.center()),
                source_index: d.source_index.unwrap_or(e.0.len()),
            });
            e.1.push(d.assigned_gt);
        }
        out
    }
}
