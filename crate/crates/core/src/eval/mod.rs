//! Detection metrics, the ambiguous-pair breakdown and comparison reports.
//!
//! # Report JSON
//!
//! [`EvalReport`] serializes to an object with, in percent: `ap` (mean over
//! IoU 0.50:0.05:0.95), `ap50`, `ap75`, `per_class` (`{class, name, ap}`),
//! and an `ambiguous` block (`correct`, `matched`, `accuracy`, Wilson 95%
//! `ci_low`/`ci_high`). `pr_curves` hold 101-point interpolated precision at
//! IoU 0.5 per class. `branches`, `model`, `checkpoint`, `corpus_checksum`,
//! `n_scenes` and `protocol` record where the numbers came from.

mod ap;
mod report;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, AMBIGUOUS_PAIRS};
use crate::error::{Error, Result};
use crate::model::{Detector, LayerPrediction, ModelConfig, SceneInput};
use crate::stats::CooccurrenceStats;

pub use ap::{
    average_precision, class_average_precision, class_precision_curve, gt_classes, iou_thresholds, recall_grid,
    Detection, GroundTruth, RECALL_POINTS,
};
pub use report::{render_report, ComparisonReport};

pub const PROTOCOL: &str = "coco-101pt-greedy; IoU 0.50:0.05:0.95; top decoder layer; argmax-class detections (presumed protocol)";

/// Detections from one layer: each query keeps its best non-sentinel class
/// unless no-object is its overall argmax.
pub fn detections_from_prediction(scene: &str, pred: &LayerPrediction) -> Vec<Detection> {
    let probs = pred.probabilities();
    let k = probs.shape()[1];
    let sentinel = k - 1;
    let mut out = Vec::new();
    for (q, &top) in pred.argmax_classes().iter().enumerate() {
        if top == sentinel {
            continue;
        }
        let row = probs.row(q);
        out.push(Detection {
            scene: scene.to_string(),
            class_id: top,
            bbox: pred.bbox(q),
            confidence: row[top],
        });
    }
    out
}

pub fn ground_truths(corpus: &Corpus) -> Vec<GroundTruth> {
    corpus
        .scenes
        .iter()
        .flat_map(|s| {
            s.items.iter().map(|it| GroundTruth {
                scene: s.id.clone(),
                class_id: it.class_id,
                bbox: it.bbox,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmbiguousAccuracy {
    pub correct: usize,
    pub matched: usize,
    /// Percent; 0 when nothing matched.
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Wilson score interval (95%) for `k` successes in `n` trials, as fractions.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054;
    let n = n as f64;
    let p = k as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Among detections matched (IoU ≥ 0.5, class-agnostic within the pair) to
/// ground truths of an ambiguous pair, the share with exactly the right class.
pub fn ambiguous_accuracy(dets: &[Detection], gts: &[GroundTruth]) -> AmbiguousAccuracy {
    let pair_of = |c: usize| AMBIGUOUS_PAIRS.iter().position(|&(a, b)| c == a || c == b);
    let mut correct = 0;
    let mut matched = 0;
    for (p, _) in AMBIGUOUS_PAIRS.iter().enumerate() {
        let pg: Vec<&GroundTruth> = gts.iter().filter(|g| pair_of(g.class_id) == Some(p)).collect();
        let mut pd: Vec<&Detection> = dets.iter().filter(|d| pair_of(d.class_id) == Some(p)).collect();
        pd.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut used = vec![false; pg.len()];
        for d in pd {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in pg.iter().enumerate() {
                if used[i] || g.scene != d.scene {
                    continue;
                }
                let iou = d.bbox.iou(&g.bbox);
                if iou >= 0.5 && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((i, iou));
                }
            }
            if let Some((i, _)) = best {
                used[i] = true;
                matched += 1;
                if pg[i].class_id == d.class_id {
                    correct += 1;
                }
            }
        }
    }
    let (lo, hi) = wilson_interval(correct, matched);
    AmbiguousAccuracy {
        correct,
        matched,
        accuracy: if matched == 0 { 0.0 } else { 100.0 * correct as f64 / matched as f64 },
        ci_low: 100.0 * lo,
        ci_high: 100.0 * hi,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub name: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class: usize,
    /// Interpolated precision at recall 0, 0.01, ..., 1 (IoU 0.5).
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Row label in comparison tables.
    pub label: String,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_class: Vec<ClassAp>,
    pub ambiguous: AmbiguousAccuracy,
    pub pr_curves: Vec<PrCurve>,
    pub branches: String,
    pub model: ModelConfig,
    pub checkpoint: Option<String>,
    pub corpus_checksum: String,
    pub n_scenes: usize,
    pub protocol: String,
    /// Free-form provenance (run config, seed).
    #[serde(default)]
    pub provenance: serde_json::Value,
}

/// Metric block over precomputed detections.
pub fn score(dets: &[Detection], gts: &[GroundTruth], class_names: &[String]) -> (f64, f64, f64, Vec<ClassAp>, Vec<PrCurve>) {
    let classes = gt_classes(gts);
    let thresholds = iou_thresholds();
    let mut per_class = Vec::with_capacity(classes.len());
    let mut curves = Vec::with_capacity(classes.len());
    for &c in &classes {
        let ap = thresholds
            .iter()
            .map(|&t| class_average_precision(dets, gts, c, t))
            .sum::<f64>()
            / thresholds.len() as f64;
        per_class.push(ClassAp {
            class: c,
            name: class_names.get(c).cloned().unwrap_or_else(|| format!("class_{c}")),
            ap: 100.0 * ap,
        });
        curves.push(PrCurve {
            class: c,
            precision: class_precision_curve(dets, gts, c, 0.5).to_vec(),
        });
    }
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    (
        mean,
        100.0 * average_precision(dets, gts, 0.5),
        100.0 * average_precision(dets, gts, 0.75),
        per_class,
        curves,
    )
}

/// Top-layer detections for every scene.
pub fn detect(det: &Detector, corpus: &Corpus, stats: Option<&CooccurrenceStats>) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for scene in &corpus.scenes {
        let input = SceneInput::from_scene(scene)?;
        let layers = det.predict(&input, stats)?;
        let top = layers.last().ok_or_else(|| Error::Config("model has no decoder layers".into()))?;
        out.extend(detections_from_prediction(&scene.id, top));
    }
    Ok(out)
}

/// Evaluates the detector's current branch setting on `corpus`.
pub fn evaluate(det: &Detector, corpus: &Corpus, stats: Option<&CooccurrenceStats>, label: &str) -> Result<EvalReport> {
    if corpus.num_classes() != det.config().num_classes {
        return Err(Error::Config(format!(
            "corpus has {} classes, checkpoint expects {}",
            corpus.num_classes(),
            det.config().num_classes
        )));
    }
    let dets = detect(det, corpus, stats)?;
    let gts = ground_truths(corpus);
    let (ap, ap50, ap75, per_class, pr_curves) = score(&dets, &gts, &corpus.class_names);
    Ok(EvalReport {
        label: label.to_string(),
        ap,
        ap50,
        ap75,
        per_class,
        ambiguous: ambiguous_accuracy(&dets, &gts),
        pr_curves,
        branches: det.config().branches.tag(),
        model: det.config().clone(),
        checkpoint: None,
        corpus_checksum: crate::corpus::corpus_checksum(corpus),
        n_scenes: corpus.len(),
        protocol: PROTOCOL.to_string(),
        provenance: serde_json::Value::Null,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
