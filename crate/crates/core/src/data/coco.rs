//! COCO-lite annotation files: `images`, `annotations` with `bbox` as
//! `[x, y, width, height]`, and `categories`. Unknown keys are ignored on read.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub bbox: BBox,
    pub category_id: u64,
    /// Set only in the sidecar of withheld ground truth.
    pub dropped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

impl Category {
    pub fn flake() -> Self {
        Self {
            id: 1,
            name: "flake".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CocoLite {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    bbox: [f64; 4],
    category_id: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    dropped: bool,
}

#[derive(Serialize, Deserialize)]
struct RawFile {
    images: Vec<ImageInfo>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<Category>,
}

/// Corner box to `[x, y, width, height]`.
pub fn bbox_to_xywh(b: &BBox) -> [f64; 4] {
    [b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1]
}

pub fn bbox_from_xywh(v: [f64; 4]) -> Result<BBox> {
    let [x, y, w, h] = v;
    if !v.iter().all(|c| c.is_finite()) {
        return Err(Error::contract("bbox_from_xywh", "non-finite coordinate"));
    }
    if w < 0.0 || h < 0.0 {
        return Err(Error::contract("bbox_from_xywh", format!("negative extent {w}×{h}")));
    }
    BBox::new(x, y, x + w, y + h)
}

impl CocoLite {
    /// Pretty-printed JSON. Corner coordinates survive a round trip exactly whenever
    /// `x2 - x1` is exactly representable, which holds for pixel-grid boxes.
    pub fn to_json(&self) -> Result<String> {
        let raw = RawFile {
            images: self.images.clone(),
            annotations: self
                .annotations
                .iter()
                .map(|a| RawAnnotation {
                    id: a.id,
                    image_id: a.image_id,
                    bbox: bbox_to_xywh(&a.bbox),
                    category_id: a.category_id,
                    dropped: a.dropped,
                })
                .collect(),
            categories: self.categories.clone(),
        };
        let mut s = serde_json::to_string_pretty(&raw)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawFile =
            serde_json::from_str(text).map_err(|e| Error::parse("document", e.to_string()))?;
        let mut image_ids = HashSet::new();
        for img in &raw.images {
            if !image_ids.insert(img.id) {
                return Err(Error::parse(format!("image {}", img.id), "duplicate image id"));
            }
        }
        let categories: HashSet<u64> = raw.categories.iter().map(|c| c.id).collect();
        let mut annotations = Vec::with_capacity(raw.annotations.len());
        for a in raw.annotations {
            let record = || format!("annotation {}", a.id);
            if !image_ids.contains(&a.image_id) {
                return Err(Error::parse(
                    record(),
                    format!("image_id {} matches no image", a.image_id),
                ));
            }
            if !categories.contains(&a.category_id) {
                return Err(Error::parse(
                    record(),
                    format!("category_id {} matches no category", a.category_id),
                ));
            }
            let bbox = bbox_from_xywh(a.bbox).map_err(|e| match e {
                Error::Contract { detail, .. } => Error::parse(record(), detail),
                other => other,
            })?;
            annotations.push(Annotation {
                id: a.id,
                image_id: a.image_id,
                bbox,
                category_id: a.category_id,
                dropped: a.dropped,
            });
        }
        Ok(Self {
            images: raw.images,
            annotations,
            categories: raw.categories,
        })
    }
}

pub fn write_cocolite(coco: &CocoLite, path: &Path) -> Result<()> {
    std::fs::write(path, coco.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn read_cocolite(path: &Path) -> Result<CocoLite> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CocoLite::from_json(&text).map_err(|e| match e {
        Error::Parse { record, reason } => {
            Error::parse(format!("{} ({record})", path.display()), reason)
        }
        other => other,
    })
}
