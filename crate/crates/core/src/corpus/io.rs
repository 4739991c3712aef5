//! COCO-style annotation files.
//!
//! ```json
//! {
//!   "images": [{"id": "scene-000000", "width": 64, "height": 64,
//!               "keypoints": {"knee": {"left": [x, y], "right": [x, y],
//!                                      "score_left": 0.9, "score_right": 0.8}},
//!               "seed": 123, "template": 2}],
//!   "annotations": [{"image_id": "scene-000000", "category_id": 6,
//!                    "bbox": [x, y, w, h]}],
//!   "categories": [{"id": 0, "name": "cap"}],
//!   "split": "train",
//!   "provenance": { ... generator config ... }
//! }
//! ```
//!
//! Boxes and keypoints are pixels in the file and normalized in memory. Image
//! ids may be strings or integers. `seed`/`template` are optional; when present
//! together with `provenance`, rasters are regenerated on load.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::generate_scene;
use super::{BoundingBox, Corpus, ItemAnnotation, KeypointKind, KeypointPair, Keypoints, Provenance, Scene, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
enum ImageId {
    Int(u64),
    Str(String),
}

impl ImageId {
    fn as_string(&self) -> String {
        match self {
            ImageId::Int(i) => i.to_string(),
            ImageId::Str(s) => s.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FileKeypoint {
    left: [f64; 2],
    right: [f64; 2],
    score_left: f64,
    score_right: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileImage {
    id: ImageId,
    width: usize,
    height: usize,
    #[serde(default)]
    keypoints: BTreeMap<String, FileKeypoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    template: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileAnnotation {
    image_id: ImageId,
    category_id: i64,
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct FileCategory {
    id: i64,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileCorpus {
    images: Vec<FileImage>,
    annotations: Vec<FileAnnotation>,
    categories: Vec<FileCategory>,
    #[serde(default)]
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len();
    }
    offset
}

pub fn load_annotations(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

/// Parses an annotation document; `origin` only labels errors.
pub fn parse_annotations(text: &str, origin: &Path) -> Result<Corpus> {
    let file: FileCorpus = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        offset: byte_offset(text, e.line(), e.column()),
        msg: e.to_string(),
    })?;

    let mut cats: Vec<&FileCategory> = file.categories.iter().collect();
    cats.sort_by_key(|c| c.id);
    let class_of: HashMap<i64, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    if class_of.len() != cats.len() {
        return Err(Error::Validation {
            scene: "<categories>".into(),
            msg: "duplicate category id".into(),
        });
    }
    let class_names: Vec<String> = cats.iter().map(|c| c.name.clone()).collect();

    let mut by_image: HashMap<ImageId, Vec<&FileAnnotation>> = HashMap::new();
    for a in &file.annotations {
        by_image.entry(a.image_id.clone()).or_default().push(a);
    }

    let mut seen = HashSet::new();
    let mut scenes = Vec::with_capacity(file.images.len());
    for img in &file.images {
        let id = img.id.as_string();
        let invalid = |msg: String| Error::Validation {
            scene: id.clone(),
            msg,
        };
        if !seen.insert(id.clone()) {
            return Err(invalid("duplicate image id".into()));
        }
        if img.width == 0 || img.height == 0 {
            return Err(invalid("image extent must be positive".into()));
        }
        let (w, h) = (img.width as f64, img.height as f64);

        let mut items = Vec::new();
        for a in by_image.remove(&img.id).unwrap_or_default() {
            let class_id = *class_of.get(&a.category_id).ok_or_else(|| {
                invalid(format!(
                    "category id {} outside the {}-class table",
                    a.category_id,
                    class_names.len()
                ))
            })?;
            let [_, _, bw, bh] = a.bbox;
            if !(bw > 0.0 && bh > 0.0) || a.bbox.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("box {:?} has nonpositive or non-finite extent", a.bbox)));
            }
            let bbox = BoundingBox::from_pixel_corner(a.bbox, w, h).clamped();
            if !(bbox.w > 0.0 && bbox.h > 0.0) {
                return Err(invalid(format!("box {:?} lies outside the image", a.bbox)));
            }
            items.push(ItemAnnotation { class_id, bbox });
        }

        let mut keypoints = Keypoints::default();
        for (name, kp) in &img.keypoints {
            let Some(kind) = KeypointKind::from_name(name) else {
                continue;
            };
            let scores_ok = [kp.score_left, kp.score_right]
                .iter()
                .all(|s| (0.0..=1.0).contains(s));
            if !scores_ok {
                return Err(invalid(format!("keypoint {name} score outside [0, 1]")));
            }
            keypoints.pairs[kind.index()] = Some(KeypointPair {
                left: [kp.left[0] / w, kp.left[1] / h],
                right: [kp.right[0] / w, kp.right[1] / h],
                score_left: kp.score_left,
                score_right: kp.score_right,
            });
        }

        let mut scene = Scene {
            id: id.clone(),
            width: img.width,
            height: img.height,
            raster: None,
            items,
            keypoints,
            style_template_id: img.template,
            seed: img.seed,
        };
        if let (Some(prov), Some(seed), Some(t)) = (&file.provenance, img.seed, img.template) {
            let template = prov.generator.template(t)?;
            let regenerated = generate_scene(seed, template, &prov.generator)?;
            let same = regenerated.items.len() == scene.items.len()
                && regenerated.items.iter().zip(&scene.items).all(|(a, b)| {
                    a.class_id == b.class_id && close_box(&a.bbox, &b.bbox)
                });
            if !same {
                return Err(invalid("annotations disagree with regenerated scene".into()));
            }
            scene.raster = regenerated.raster;
        }
        scenes.push(scene);
    }
    if let Some(orphan) = by_image.keys().next() {
        return Err(Error::Validation {
            scene: orphan.as_string(),
            msg: "annotation references unknown image".into(),
        });
    }

    Ok(Corpus {
        scenes,
        class_names,
        split: file.split,
        provenance: file.provenance,
    })
}

fn close_box(a: &BoundingBox, b: &BoundingBox) -> bool {
    (a.cx - b.cx).abs() < 1e-9 && (a.cy - b.cy).abs() < 1e-9 && (a.w - b.w).abs() < 1e-9 && (a.h - b.h).abs() < 1e-9
}

fn to_file(corpus: &Corpus) -> FileCorpus {
    let mut images = Vec::with_capacity(corpus.scenes.len());
    let mut annotations = Vec::new();
    for s in &corpus.scenes {
        let (w, h) = (s.width as f64, s.height as f64);
        let keypoints = KeypointKind::ALL
            .iter()
            .filter_map(|&k| {
                s.keypoints.get(k).map(|p| {
                    (
                        k.name().to_string(),
                        FileKeypoint {
                            left: [p.left[0] * w, p.left[1] * h],
                            right: [p.right[0] * w, p.right[1] * h],
                            score_left: p.score_left,
                            score_right: p.score_right,
                        },
                    )
                })
            })
            .collect();
        images.push(FileImage {
            id: ImageId::Str(s.id.clone()),
            width: s.width,
            height: s.height,
            keypoints,
            seed: s.seed,
            template: s.style_template_id,
        });
        for it in &s.items {
            annotations.push(FileAnnotation {
                image_id: ImageId::Str(s.id.clone()),
                category_id: it.class_id as i64,
                bbox: it.bbox.to_pixel_corner(w, h),
            });
        }
    }
    FileCorpus {
        images,
        annotations,
        categories: corpus
            .class_names
            .iter()
            .enumerate()
            .map(|(i, n)| FileCategory {
                id: i as i64,
                name: n.clone(),
            })
            .collect(),
        split: corpus.split,
        provenance: corpus.provenance.clone(),
    }
}

pub fn corpus_to_json(corpus: &Corpus) -> String {
    serde_json::to_string_pretty(&to_file(corpus)).expect("corpus serialization is infallible")
}

pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::write(path, corpus_to_json(corpus)).map_err(|e| Error::io(path, e))
}

/// SHA-256 of the canonical serialization.
pub fn corpus_checksum(corpus: &Corpus) -> String {
    let digest = Sha256::digest(corpus_to_json(corpus).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
