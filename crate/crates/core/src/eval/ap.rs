//! COCO-style average precision: greedy per-image matching, 101-point interpolation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::BoundingBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene: String,
    pub class_id: usize,
    pub bbox: BoundingBox,
    /// Softmax probability of `class_id`.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scene: String,
    pub class_id: usize,
    pub bbox: BoundingBox,
}

pub const RECALL_POINTS: usize = 101;

/// The recall grid `0, 0.01, ..., 1`.
pub fn recall_grid() -> [f64; RECALL_POINTS] {
    std::array::from_fn(|i| i as f64 / 100.0)
}

/// `[0.50, 0.55, ..., 0.95]`
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Detections of one class ordered by descending confidence; ties keep input order.
fn ranked(dets: &[Detection], class: usize) -> Vec<&Detection> {
    let mut v: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class).collect();
    v.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    v
}

/// TP flags for ranked detections: each takes the highest-IoU unmatched ground
/// truth of its image at or above the threshold.
fn match_flags(ranked: &[&Detection], gts: &[&GroundTruth], iou_threshold: f64) -> Vec<bool> {
    let mut by_scene: HashMap<&str, Vec<(usize, &GroundTruth)>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_scene.entry(g.scene.as_str()).or_default().push((i, g));
    }
    let mut used = vec![false; gts.len()];
    ranked
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for &(i, g) in by_scene.get(d.scene.as_str()).map_or(&[][..], Vec::as_slice) {
                if used[i] {
                    continue;
                }
                let iou = d.bbox.iou(&g.bbox);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((i, iou));
                }
            }
            match best {
                Some((i, _)) => {
                    used[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Interpolated precision at each of the 101 recall points for one class.
pub fn class_precision_curve(dets: &[Detection], gts: &[GroundTruth], class: usize, iou_threshold: f64) -> [f64; RECALL_POINTS] {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class).collect();
    let mut curve = [0.0; RECALL_POINTS];
    if gts.is_empty() {
        return curve;
    }
    let ranked = ranked(dets, class);
    let flags = match_flags(&ranked, &gts, iou_threshold);
    let n_gt = gts.len() as f64;
    let mut tp = 0.0;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1.0;
        }
        recall.push(tp / n_gt);
        precision.push(tp / (k + 1) as f64);
    }
    // monotone envelope from the right
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    for (slot, r) in curve.iter_mut().zip(recall_grid()) {
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            *slot = precision[idx];
        }
    }
    curve
}

/// Classes present in the ground truth, ascending.
pub fn gt_classes(gts: &[GroundTruth]) -> Vec<usize> {
    let mut c: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// AP of one class at one IoU threshold.
pub fn class_average_precision(dets: &[Detection], gts: &[GroundTruth], class: usize, iou_threshold: f64) -> f64 {
    class_precision_curve(dets, gts, class, iou_threshold).iter().sum::<f64>() / RECALL_POINTS as f64
}

/// Mean over ground-truth classes of the per-class AP at `iou_threshold`; 0 without ground truth.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> f64 {
    let classes = gt_classes(gts);
    if classes.is_empty() {
        return 0.0;
    }
    classes
        .iter()
        .map(|&c| class_average_precision(dets, gts, c, iou_threshold))
        .sum::<f64>()
        / classes.len() as f64
}
