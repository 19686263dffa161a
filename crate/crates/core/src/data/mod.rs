//! Synthetic dense-ellipse scenes, annotation withholding, and on-disk datasets.
//!
//! A dataset directory holds:
//!
//! ```text
//! images/NNNNNN.pgm   8-bit scenes
//! train.json          kept annotations only
//! eval.json           complete ground truth
//! dropped.json        withheld annotations, each marked "dropped": true
//! ```
//!
//! Annotation ids are shared across the three files, so `train.json` and
//! `eval.json` are byte-identical when nothing is withheld.

mod coco;
mod pgm;
mod synth;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use coco::{
    bbox_from_xywh, bbox_to_xywh, read_cocolite, write_cocolite, Annotation, Category, CocoLite,
    ImageInfo,
};
pub use pgm::GrayImage;
pub use synth::{
    drop_annotations, drop_mask, render_noiseless, synthesize_scene, Ellipse, SceneParams, SceneSpec,
};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const TRAIN_FILE: &str = "train.json";
pub const EVAL_FILE: &str = "eval.json";
pub const DROPPED_FILE: &str = "dropped.json";
pub const IMAGE_DIR: &str = "images";

/// Ground truth of one image, split into what training sees and what it does not.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: u64,
    pub file_name: String,
    pub boxes: Vec<BBox>,
    pub dropped_boxes: Vec<BBox>,
}

impl AnnotationRecord {
    /// Kept boxes followed by dropped boxes.
    pub fn full_boxes(&self) -> Vec<BBox> {
        self.boxes.iter().chain(&self.dropped_boxes).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub record: AnnotationRecord,
    pub image: GrayImage,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Which annotation file populates `boxes` on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// `train.json`, plus `dropped.json` into `dropped_boxes` when present.
    Train,
    /// `eval.json`; `dropped_boxes` stays empty.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub images: usize,
    pub drop_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub scene: SceneParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 200,
            drop_rate: 0.3,
            seed: 0,
            scene: SceneParams::default(),
        }
    }
}

/// Renders `config.images` scenes in parallel; each image's scene and drop draw are
/// seeded from a per-image stream of the master seed.
pub fn synthesize_dataset(config: &SynthConfig) -> Result<Dataset> {
    if config.images == 0 {
        return Err(Error::contract("synthesize_dataset", "images must be positive"));
    }
    if !(0.0..1.0).contains(&config.drop_rate) {
        return Err(Error::contract(
            "synthesize_dataset",
            format!("drop rate {} outside [0, 1)", config.drop_rate),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let seeds: Vec<(u64, u64)> = (0..config.images).map(|_| (rng.random(), rng.random())).collect();
    let samples = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &(scene_seed, drop_seed))| {
            let spec = SceneSpec::random(&config.scene, scene_seed);
            let (image, boxes) = synthesize_scene(&spec)?;
            let (kept, dropped) = drop_annotations(&boxes, config.drop_rate, drop_seed)?;
            Ok(Sample {
                record: AnnotationRecord {
                    image_id: i as u64,
                    file_name: format!("{IMAGE_DIR}/{i:06}.pgm"),
                    boxes: kept,
                    dropped_boxes: dropped,
                },
                image,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_dropped(&self) -> usize {
        self.samples.iter().map(|s| s.record.dropped_boxes.len()).sum()
    }

    pub fn num_boxes(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.record.boxes.len() + s.record.dropped_boxes.len())
            .sum()
    }

    /// Builds the `train`, `eval` and `dropped` annotation files, in that order.
    pub fn to_cocolite(&self) -> (CocoLite, CocoLite, CocoLite) {
        let images: Vec<ImageInfo> = self
            .samples
            .iter()
            .map(|s| ImageInfo {
                id: s.record.image_id,
                file_name: s.record.file_name.clone(),
                height: s.image.height(),
                width: s.image.width(),
            })
            .collect();
        let category = Category::flake();
        let (mut train, mut eval, mut dropped) = (Vec::new(), Vec::new(), Vec::new());
        let mut next_id = 0u64;
        for s in &self.samples {
            let tagged = s
                .record
                .boxes
                .iter()
                .map(|b| (b, false))
                .chain(s.record.dropped_boxes.iter().map(|b| (b, true)));
            for (b, is_dropped) in tagged {
                let ann = Annotation {
                    id: next_id,
                    image_id: s.record.image_id,
                    bbox: *b,
                    category_id: category.id,
                    dropped: false,
                };
                next_id += 1;
                eval.push(ann.clone());
                if is_dropped {
                    dropped.push(Annotation { dropped: true, ..ann });
                } else {
                    train.push(ann);
                }
            }
        }
        let file = |annotations| CocoLite {
            images: images.clone(),
            annotations,
            categories: vec![category.clone()],
        };
        (file(train), file(eval), file(dropped))
    }

    /// Writes images and the three annotation files under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let image_dir = dir.join(IMAGE_DIR);
        std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
        for s in &self.samples {
            s.image.save(&dir.join(&s.record.file_name))?;
        }
        let (train, eval, dropped) = self.to_cocolite();
        write_cocolite(&train, &dir.join(TRAIN_FILE))?;
        write_cocolite(&eval, &dir.join(EVAL_FILE))?;
        write_cocolite(&dropped, &dir.join(DROPPED_FILE))
    }

    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let main = match split {
            Split::Train => TRAIN_FILE,
            Split::Eval => EVAL_FILE,
        };
        let main_path = dir.join(main);
        if !main_path.exists() {
            return Err(Error::io(
                &main_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "annotation file not found"),
            ));
        }
        let coco = read_cocolite(&main_path)?;
        let sidecar_path = dir.join(DROPPED_FILE);
        let sidecar = if split == Split::Train && sidecar_path.exists() {
            Some(read_cocolite(&sidecar_path)?)
        } else {
            None
        };
        let index: std::collections::HashMap<u64, usize> =
            coco.images.iter().enumerate().map(|(i, img)| (img.id, i)).collect();
        let mut records: Vec<AnnotationRecord> = coco
            .images
            .iter()
            .map(|img| AnnotationRecord {
                image_id: img.id,
                file_name: img.file_name.clone(),
                boxes: Vec::new(),
                dropped_boxes: Vec::new(),
            })
            .collect();
        for a in &coco.annotations {
            records[index[&a.image_id]].boxes.push(a.bbox);
        }
        if let Some(side) = sidecar {
            for a in &side.annotations {
                let slot = index.get(&a.image_id).ok_or_else(|| {
                    Error::parse(
                        format!("{} (annotation {})", sidecar_path.display(), a.id),
                        format!("image_id {} absent from {main}", a.image_id),
                    )
                })?;
                records[*slot].dropped_boxes.push(a.bbox);
            }
        }
        let samples = records
            .into_par_iter()
            .zip(coco.images.par_iter())
            .map(|(record, info)| {
                let image = GrayImage::load(&dir.join(&record.file_name))?;
                if image.height() != info.height || image.width() != info.width {
                    return Err(Error::parse(
                        format!("image {}", info.id),
                        format!(
                            "file is {}×{}, annotation says {}×{}",
                            image.height(),
                            image.width(),
                            info.height,
                            info.width
                        ),
                    ));
                }
                Ok(Sample { record, image })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(drop_rate: f64) -> SynthConfig {
        SynthConfig {
            images: 6,
            drop_rate,
            seed: 9,
            scene: SceneParams::default(),
        }
    }

    #[test]
    fn record_partition_holds() {
        let ds = synthesize_dataset(&small(0.3)).unwrap();
        for s in &ds.samples {
            assert!(!s.record.boxes.is_empty());
            assert!(s.record.dropped_boxes.iter().all(|d| !s.record.boxes.contains(d)));
        }
        assert_eq!(ds, synthesize_dataset(&small(0.3)).unwrap());
    }

    #[test]
    fn zero_drop_gives_identical_train_and_eval() {
        let ds = synthesize_dataset(&small(0.0)).unwrap();
        let (train, eval, dropped) = ds.to_cocolite();
        assert_eq!(train.to_json().unwrap(), eval.to_json().unwrap());
        assert!(dropped.annotations.is_empty());
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthesize_dataset(&small(0.4)).unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path(), Split::Train).unwrap(), ds);
        let eval = Dataset::load(dir.path(), Split::Eval).unwrap();
        for (e, s) in eval.samples.iter().zip(&ds.samples) {
            assert_eq!(e.record.boxes, s.record.full_boxes());
            assert!(e.record.dropped_boxes.is_empty());
        }
    }

    #[test]
    fn missing_annotation_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Dataset::load(dir.path(), Split::Train),
            Err(Error::Io { .. })
        ));
    }
}
