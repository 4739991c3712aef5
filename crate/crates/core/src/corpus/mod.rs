//! Scenes, annotations, keypoints and the synthetic outfit generator.

mod generate;
mod io;

use serde::{Deserialize, Serialize};

pub use generate::{
    generate_corpus, generate_scene, glyph_rect, GeneratorConfig, StyleTemplate, TemplateMix,
    AMBIGUOUS_PAIRS, CLASS_NAMES, NUM_CLASSES,
};
pub use io::{corpus_checksum, corpus_to_json, load_annotations, parse_annotations, save_corpus};

/// Axis-aligned box, center format, normalized to the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoundingBox { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoundingBox {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// From a pixel `[x, y, w, h]` top-left box in an image of the given size.
    pub fn from_pixel_corner(b: [f64; 4], width: f64, height: f64) -> Self {
        BoundingBox {
            cx: (b[0] + b[2] / 2.0) / width,
            cy: (b[1] + b[3] / 2.0) / height,
            w: b[2] / width,
            h: b[3] / height,
        }
    }

    pub fn to_pixel_corner(&self, width: f64, height: f64) -> [f64; 4] {
        let (x1, y1, _, _) = self.corners();
        [x1 * width, y1 * height, self.w * width, self.h * height]
    }

    /// `(x1, y1, x2, y2)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Intersect with the unit square.
    pub fn clamped(&self) -> BoundingBox {
        let (x1, y1, x2, y2) = self.corners();
        BoundingBox::from_corners(x1.max(0.0), y1.max(0.0), x2.min(1.0), y2.min(1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemAnnotation {
    pub class_id: usize,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointKind {
    Shoulder,
    Hip,
    Knee,
    Ankle,
}

impl KeypointKind {
    /// Channel order of the item-human relation tensor.
    pub const ALL: [KeypointKind; 4] = [
        KeypointKind::Shoulder,
        KeypointKind::Hip,
        KeypointKind::Knee,
        KeypointKind::Ankle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KeypointKind::Shoulder => "shoulder",
            KeypointKind::Hip => "hip",
            KeypointKind::Knee => "knee",
            KeypointKind::Ankle => "ankle",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Left/right detections of one body joint; normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointPair {
    pub left: [f64; 2],
    pub right: [f64; 2],
    pub score_left: f64,
    pub score_right: f64,
}

impl KeypointPair {
    pub fn midpoint(&self) -> [f64; 2] {
        [
            (self.left[0] + self.right[0]) / 2.0,
            (self.left[1] + self.right[1]) / 2.0,
        ]
    }

    pub fn score(&self) -> f64 {
        (self.score_left + self.score_right) / 2.0
    }
}

/// Shoulder, hip, knee and ankle pairs; `None` marks an absent joint.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoints {
    pub pairs: [Option<KeypointPair>; 4],
}

impl Keypoints {
    pub fn get(&self, kind: KeypointKind) -> Option<&KeypointPair> {
        self.pairs[kind.index()].as_ref()
    }

    /// Averaged point `h_k`.
    pub fn point(&self, kind: KeypointKind) -> Option<[f64; 2]> {
        self.get(kind).map(KeypointPair::midpoint)
    }

    /// Averaged confidence `s_k`; absent joints score 0.
    pub fn score(&self, kind: KeypointKind) -> f64 {
        self.get(kind).map_or(0.0, KeypointPair::score)
    }
}

/// `height x width x 3` image, values in `[0, 1]`, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Raster {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Channel-major copy, `[3, H, W]`.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Present for generated scenes; file-only corpora carry annotations alone.
    pub raster: Option<Raster>,
    pub items: Vec<ItemAnnotation>,
    pub keypoints: Keypoints,
    pub style_template_id: Option<usize>,
    /// Per-scene generator seed, when synthetic.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

/// How a synthetic corpus was produced; enough to regenerate every raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub prng: String,
    pub master_seed: u64,
    pub n_scenes: usize,
    pub template_mix: TemplateMix,
    pub generator: GeneratorConfig,
    /// Run that wrote the file (config hash, seed).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub scenes: Vec<Scene>,
    pub class_names: Vec<String>,
    pub split: Split,
    pub provenance: Option<Provenance>,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Builds a corpus from bare class sets (no geometry); handy for statistics.
    pub fn from_class_sets(num_classes: usize, sets: &[&[usize]]) -> Self {
        let scenes = sets
            .iter()
            .enumerate()
            .map(|(i, classes)| Scene {
                id: format!("scene-{i}"),
                width: 1,
                height: 1,
                raster: None,
                items: classes
                    .iter()
                    .map(|&c| ItemAnnotation {
                        class_id: c,
                        bbox: BoundingBox::new(0.5, 0.5, 0.1, 0.1),
                    })
                    .collect(),
                keypoints: Keypoints::default(),
                style_template_id: None,
                seed: None,
            })
            .collect();
        Corpus {
            scenes,
            class_names: (0..num_classes).map(|c| format!("class_{c}")).collect(),
            split: Split::Train,
            provenance: None,
        }
    }
}
