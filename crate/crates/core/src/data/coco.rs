//! The COCO keypoint subset used here.
//!
//! Retained fields: `images[].{id, file_name, width, height}`,
//! `annotations[].{id, image_id, category_id, bbox, keypoints, area, num_keypoints}`
//! and `categories[].{id, name, keypoints, skeleton}`. Everything else is ignored.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Keypoint, NUM_KEYPOINTS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

/// Axis-aligned box `(x, y, w, h)` in pixels; `(x, y)` is the top-left edge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Tightest box around the labeled keypoints, or `None` if there are none.
    pub fn around(kps: &[Keypoint]) -> Option<Self> {
        let pts: Vec<_> = kps.iter().filter(|k| k.is_labeled()).collect();
        if pts.is_empty() {
            return None;
        }
        let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), k| (a.min(k.x), b.max(k.x)));
        let (y0, y1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), k| (a.min(k.y), b.max(k.y)));
        Some(Self::new(x0, y0, x1 - x0, y1 - y0))
    }
}

/// One annotated animal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointInstance {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub keypoints: Vec<Keypoint>,
    /// The `area` field when present; see [`KeypointInstance::scale_area`].
    pub area: Option<f64>,
}

impl KeypointInstance {
    /// Object scale `s²` for OKS: the annotated area, else `w·h` of the box.
    pub fn scale_area(&self) -> f64 {
        self.area.unwrap_or_else(|| self.bbox.area())
    }

    pub fn num_labeled(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_labeled()).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub keypoints: Vec<String>,
    #[serde(default)]
    pub skeleton: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageInfo>,
    pub instances: Vec<KeypointInstance>,
    pub categories: Vec<Category>,
}

#[derive(Deserialize)]
struct RawFile {
    images: Vec<ImageInfo>,
    annotations: Vec<serde_json::Value>,
    #[serde(default)]
    categories: Vec<Category>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    #[serde(default = "default_category")]
    category_id: u64,
    bbox: [f64; 4],
    keypoints: Vec<f64>,
    #[serde(default)]
    area: Option<f64>,
}

fn default_category() -> u64 {
    1
}

#[derive(Serialize)]
struct OutAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    keypoints: Vec<f64>,
    num_keypoints: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    iscrowd: u8,
}

#[derive(Serialize)]
struct OutFile<'a> {
    images: &'a [ImageInfo],
    annotations: Vec<OutAnnotation>,
    categories: &'a [Category],
}

/// Parses and validates a COCO keypoint file.
pub fn parse_annotations(bytes: &[u8]) -> Result<Dataset> {
    let raw: RawFile =
        serde_json::from_slice(bytes).map_err(|e| Error::Annotation(format!("malformed COCO JSON: {e}")))?;
    let mut seen = BTreeSet::new();
    for img in &raw.images {
        if !seen.insert(img.id) {
            return Err(Error::Annotation(format!("duplicate image id {}", img.id)));
        }
    }
    let sizes: BTreeMap<u64, (u32, u32)> = raw.images.iter().map(|i| (i.id, (i.width, i.height))).collect();
    let mut instances = Vec::with_capacity(raw.annotations.len());
    for (idx, value) in raw.annotations.into_iter().enumerate() {
        let a: RawAnnotation = serde_json::from_value(value)
            .map_err(|e| Error::Annotation(format!("annotation {idx}: {e}")))?;
        let inst = build_instance(idx, a, &sizes)?;
        instances.push(inst);
    }
    Ok(Dataset { images: raw.images, instances, categories: raw.categories })
}

fn build_instance(idx: usize, a: RawAnnotation, sizes: &BTreeMap<u64, (u32, u32)>) -> Result<KeypointInstance> {
    let err = |msg: String| Error::Annotation(format!("annotation {idx} (id {}): {msg}", a.id));
    if a.keypoints.len() != 3 * NUM_KEYPOINTS {
        return Err(err(format!("keypoints array has length {}, expected {}", a.keypoints.len(), 3 * NUM_KEYPOINTS)));
    }
    let &(w, h) = sizes.get(&a.image_id).ok_or_else(|| err(format!("unknown image_id {}", a.image_id)))?;
    let [bx, by, bw, bh] = a.bbox;
    if !(bw > 0.0 && bh > 0.0) || !bx.is_finite() || !by.is_finite() {
        return Err(err(format!("bbox {:?} must have positive width and height", a.bbox)));
    }
    if let Some(area) = a.area {
        if !(area > 0.0) {
            return Err(err(format!("area {area} must be positive")));
        }
    }
    let mut keypoints = Vec::with_capacity(NUM_KEYPOINTS);
    for (k, c) in a.keypoints.chunks_exact(3).enumerate() {
        let v = c[2];
        if v != 0.0 && v != 1.0 && v != 2.0 {
            return Err(err(format!("keypoint {k} has visibility {v}, expected 0, 1 or 2")));
        }
        let kp = Keypoint::new(c[0], c[1], v as u8);
        if kp.is_labeled() && !(kp.x >= 0.0 && kp.y >= 0.0 && kp.x < f64::from(w) && kp.y < f64::from(h)) {
            return Err(err(format!("keypoint {k} at ({}, {}) lies outside the {w}x{h} image", kp.x, kp.y)));
        }
        keypoints.push(kp);
    }
    Ok(KeypointInstance {
        id: a.id,
        image_id: a.image_id,
        category_id: a.category_id,
        bbox: BBox::new(bx, by, bw, bh),
        keypoints,
        area: a.area,
    })
}

impl Dataset {
    pub fn to_json(&self) -> Result<String> {
        let annotations = self
            .instances
            .iter()
            .map(|i| OutAnnotation {
                id: i.id,
                image_id: i.image_id,
                category_id: i.category_id,
                bbox: [i.bbox.x, i.bbox.y, i.bbox.w, i.bbox.h],
                keypoints: i.keypoints.iter().flat_map(|k| [k.x, k.y, f64::from(k.v)]).collect(),
                num_keypoints: i.num_labeled(),
                area: i.area,
                iscrowd: 0,
            })
            .collect();
        let out = OutFile { images: &self.images, annotations, categories: &self.categories };
        Ok(serde_json::to_string_pretty(&out)?)
    }

    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Instances grouped by image id, in ascending id order.
    pub fn by_image(&self) -> BTreeMap<u64, Vec<&KeypointInstance>> {
        let mut map: BTreeMap<u64, Vec<&KeypointInstance>> = self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for inst in &self.instances {
            map.entry(inst.image_id).or_default().push(inst);
        }
        map
    }

    /// The single cattle category with the fixed skeleton.
    pub fn default_categories() -> Vec<Category> {
        vec![Category {
            id: 1,
            name: "cattle".into(),
            keypoints: super::KEYPOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            skeleton: super::LIMBS.iter().map(|&(a, b)| [a + 1, b + 1]).collect(),
        }]
    }
}
