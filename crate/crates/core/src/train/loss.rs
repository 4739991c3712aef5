//! Matching costs, generalized IoU and the per-layer set loss.

use serde::{Deserialize, Serialize};

use super::matching::{hungarian_match, CostMatrix, MatchResult};
use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::{BoundingBox, ItemAnnotation};
use crate::error::{Error, Result};
use crate::model::{LayerOutput, LayerPrediction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    /// Cross-entropy weight of queries matched to nothing.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            l1: 5.0,
            giou: 2.0,
            no_object: 0.1,
        }
    }
}

/// `IoU - (hull - union) / hull`, in `(-1, 1]`.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    inter / union - (hull - union) / hull
}

/// `w_cls·(−p_class) + w_l1·‖b_pred − b_gt‖₁ + w_giou·(1 − GIoU)`.
pub fn pair_cost(probs: &[f64], bbox: &BoundingBox, gt: &ItemAnnotation, w: &LossWeights) -> f64 {
    let g = &gt.bbox;
    let l1 = (bbox.cx - g.cx).abs() + (bbox.cy - g.cy).abs() + (bbox.w - g.w).abs() + (bbox.h - g.h).abs();
    -w.cls * probs[gt.class_id] + w.l1 * l1 + w.giou * (1.0 - giou(bbox, g))
}

pub fn cost_matrix(pred: &LayerPrediction, gts: &[ItemAnnotation], w: &LossWeights) -> Result<CostMatrix> {
    let probs = pred.probabilities();
    let n = pred.num_queries();
    let k = probs.shape()[1];
    let mut data = Vec::with_capacity(gts.len() * n);
    for gt in gts {
        if gt.class_id + 1 >= k {
            return Err(Error::Index {
                what: "ground-truth class",
                index: gt.class_id,
                size: k - 1,
            });
        }
        for q in 0..n {
            data.push(pair_cost(probs.row(q), &pred.bbox(q), gt, w));
        }
    }
    CostMatrix::new(gts.len(), n, data)
}

/// Unweighted terms of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerLoss {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub layers: Vec<LayerLoss>,
    /// `Σ_layer w_cls·cls + w_l1·l1 + w_giou·giou`
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum of one term over layers.
    pub fn term(&self, name: &str, w: &LossWeights) -> f64 {
        self.layers
            .iter()
            .map(|l| match name {
                "cls" => w.cls * l.cls,
                "l1" => w.l1 * l.l1,
                _ => w.giou * l.giou,
            })
            .sum()
    }
}

/// Per-pair `1 − GIoU` on the tape; `pred` and `gt` are `[M, 4]` in center format.
pub fn giou_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let corners = |tape: &mut Tape, b: Var| -> Result<[Var; 4]> {
        let c = tape.slice(b, 1, 0, 2)?;
        let s = tape.slice(b, 1, 2, 2)?;
        let half = tape.scale(s, 0.5);
        let lo = tape.sub(c, half)?;
        let hi = tape.add(c, half)?;
        Ok([
            tape.slice(lo, 1, 0, 1)?,
            tape.slice(lo, 1, 1, 1)?,
            tape.slice(hi, 1, 0, 1)?,
            tape.slice(hi, 1, 1, 1)?,
        ])
    };
    let [ax1, ay1, ax2, ay2] = corners(tape, pred)?;
    let [bx1, by1, bx2, by2] = corners(tape, gt)?;
    let area = |tape: &mut Tape, x1: Var, y1: Var, x2: Var, y2: Var| -> Result<Var> {
        let w = tape.sub(x2, x1)?;
        let h = tape.sub(y2, y1)?;
        tape.mul(w, h)
    };
    let extent = |tape: &mut Tape, lo: Var, hi: Var| -> Result<Var> {
        let d = tape.sub(hi, lo)?;
        Ok(tape.relu(d))
    };
    let ix1 = tape.maximum(ax1, bx1)?;
    let iy1 = tape.maximum(ay1, by1)?;
    let ix2 = tape.minimum(ax2, bx2)?;
    let iy2 = tape.minimum(ay2, by2)?;
    let iw = extent(tape, ix1, ix2)?;
    let ih = extent(tape, iy1, iy2)?;
    let inter = tape.mul(iw, ih)?;
    let area_a = area(tape, ax1, ay1, ax2, ay2)?;
    let area_b = area(tape, bx1, by1, bx2, by2)?;
    let sum = tape.add(area_a, area_b)?;
    let union = tape.sub(sum, inter)?;
    let hx1 = tape.minimum(ax1, bx1)?;
    let hy1 = tape.minimum(ay1, by1)?;
    let hx2 = tape.maximum(ax2, bx2)?;
    let hy2 = tape.maximum(ay2, by2)?;
    let hull = area(tape, hx1, hy1, hx2, hy2)?;
    let iou = tape.div(inter, union)?;
    let gap = tape.sub(hull, union)?;
    let penalty = tape.div(gap, hull)?;
    let g = tape.sub(iou, penalty)?;
    let one_minus = tape.scale(g, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let m = tape.shape(one_minus)[0];
    tape.reshape(one_minus, &[m])
}

/// Loss of one layer given its matching. Returns the weighted scalar and the raw terms.
pub fn layer_loss(
    tape: &mut Tape,
    out: &LayerOutput,
    matching: &MatchResult,
    gts: &[ItemAnnotation],
    w: &LossWeights,
) -> Result<(Var, LayerLoss)> {
    let shape = tape.shape(out.logits).to_vec();
    let (n, k) = (shape[0], shape[1]);
    let sentinel = k - 1;
    let mut target = vec![sentinel; n];
    for (g, &q) in matching.assignment.iter().enumerate() {
        target[q] = gts[g].class_id;
    }
    // one-hot rows scaled by per-query weight, normalized by the weight sum
    let mut sel = vec![0.0; n * k];
    let mut weight_sum = 0.0;
    for (q, &t) in target.iter().enumerate() {
        let wq = if t == sentinel { w.no_object } else { 1.0 };
        sel[q * k + t] = wq;
        weight_sum += wq;
    }
    for v in &mut sel {
        *v /= weight_sum;
    }
    let logp = tape.log_softmax(out.logits, 1)?;
    let sel = tape.constant(Tensor::new(&[n, k], sel)?);
    let picked = tape.mul(logp, sel)?;
    let ce = tape.sum(picked, None)?;
    let cls = tape.scale(ce, -1.0);
    let mut total = tape.scale(cls, w.cls);
    let mut terms = LayerLoss {
        cls: tape.value(cls).item(),
        ..LayerLoss::default()
    };
    if !gts.is_empty() {
        let num = gts.len() as f64;
        let pred = tape.gather_rows(out.boxes, &matching.assignment)?;
        let gt = Tensor::from_fn(&[gts.len(), 4], |i| {
            let b = &gts[i / 4].bbox;
            [b.cx, b.cy, b.w, b.h][i % 4]
        });
        let gt = tape.constant(gt);
        let diff = tape.sub(pred, gt)?;
        let abs = tape.abs(diff);
        let l1 = tape.sum(abs, None)?;
        let l1 = tape.scale(l1, 1.0 / num);
        let gl = giou_loss(tape, pred, gt)?;
        let gl = tape.sum(gl, None)?;
        let gl = tape.scale(gl, 1.0 / num);
        terms.l1 = tape.value(l1).item();
        terms.giou = tape.value(gl).item();
        let l1w = tape.scale(l1, w.l1);
        let glw = tape.scale(gl, w.giou);
        total = tape.add(total, l1w)?;
        total = tape.add(total, glw)?;
    }
    Ok((total, terms))
}

/// Sums matched losses over `layers`, matching each layer independently.
pub fn set_loss(
    tape: &mut Tape,
    layers: &[LayerOutput],
    gts: &[ItemAnnotation],
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let mut total: Option<Var> = None;
    let mut breakdown = LossBreakdown::default();
    for out in layers {
        let pred = LayerPrediction::read(tape, out);
        let cost = cost_matrix(&pred, gts, w)?;
        let matching = if cost.data.iter().all(|v| v.is_finite()) || cost.rows > cost.cols {
            hungarian_match(&cost)?
        } else {
            // non-finite predictions: any assignment yields the same non-finite loss,
            // which the caller reports by term
            MatchResult {
                assignment: (0..cost.rows).collect(),
                cost: f64::NAN,
            }
        };
        let (l, terms) = layer_loss(tape, out, &matching, gts, w)?;
        breakdown.layers.push(terms);
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::arg("set_loss", "no decoder layers"))?;
    breakdown.total = tape.value(total).item();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use crate::rng::stream;
    use rand::Rng as _;

    fn item(c: usize, cx: f64, cy: f64, w: f64, h: f64) -> ItemAnnotation {
        ItemAnnotation {
            class_id: c,
            bbox: BoundingBox::new(cx, cy, w, h),
        }
    }

    #[test]
    fn giou_reference_values() {
        let a = BoundingBox::new(0.5, 0.5, 0.2, 0.2);
        assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
        // touching squares of side 1: union 2, hull 2x1 = 2 -> 0 - 0 = 0
        let l = BoundingBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let r = BoundingBox::from_corners(1.0, 0.0, 2.0, 1.0);
        assert_eq!(giou(&l, &r), 0.0);
        // unit-separated: [0,1] and [2,3] -> hull 3, union 2 -> -1/3
        let r = BoundingBox::from_corners(2.0, 0.0, 3.0, 1.0);
        assert!((giou(&l, &r) + 1.0 / 3.0).abs() < 1e-12);
        let mut prev = 1.0;
        for k in 1..50 {
            let d = k as f64;
            let far = BoundingBox::from_corners(d, d, d + 1.0, d + 1.0);
            let v = giou(&l, &far);
            assert!(v < prev && v > -1.0);
            prev = v;
        }
        assert!(prev < -0.99);
    }

    #[test]
    fn pair_cost_hand_values() {
        let w = LossWeights::default();
        let gt = item(0, 0.5, 0.5, 0.2, 0.2);
        assert_eq!(pair_cost(&[1.0, 0.0], &gt.bbox, &gt, &w), -w.cls);
        assert_eq!(pair_cost(&[0.0, 1.0], &gt.bbox, &gt, &w), 0.0);
        let b = BoundingBox::new(0.6, 0.5, 0.2, 0.2);
        // l1 = 0.1; overlap 0.1x0.2 = 0.02, union 0.06, hull 0.3x0.2 = 0.06 -> giou 1/3
        let expected = -0.5 + 5.0 * 0.1 + 2.0 * (1.0 - 1.0 / 3.0);
        assert!((pair_cost(&[0.5, 0.5], &b, &gt, &w) - expected).abs() < 1e-12);
    }

    fn fake_layer(tape: &mut Tape, logits: Tensor, boxes: Tensor) -> LayerOutput {
        LayerOutput {
            logits: tape.leaf(logits),
            boxes: tape.leaf(boxes),
            relation_weights: None,
            self_attention: vec![],
            context: None,
        }
    }

    #[test]
    fn zero_truths_is_pure_no_object_ce() {
        let mut tape = Tape::new();
        let logits = Tensor::new(&[2, 3], vec![0.0, 1.0, 2.0, 1.0, 1.0, 1.0]).unwrap();
        let out = fake_layer(&mut tape, logits, Tensor::full(&[2, 4], 0.5));
        let (_, b) = set_loss(&mut tape, &[out], &[], &LossWeights::default()).unwrap();
        let lse0 = (1.0f64 + 1f64.exp() + 2f64.exp()).ln();
        let expected = ((lse0 - 2.0) + 3f64.ln()) / 2.0;
        assert!((b.total - expected).abs() < 1e-12);
        assert_eq!(b.layers[0].l1, 0.0);
        assert_eq!(b.layers[0].giou, 0.0);
    }

    #[test]
    fn confident_exact_predictions_approach_zero() {
        let gt = [item(1, 0.3, 0.4, 0.2, 0.3)];
        let mut tape = Tape::new();
        let logits = Tensor::new(&[2, 3], vec![-40.0, 40.0, -40.0, -40.0, -40.0, 40.0]).unwrap();
        let boxes = Tensor::new(&[2, 4], vec![0.3, 0.4, 0.2, 0.3, 0.7, 0.7, 0.1, 0.1]).unwrap();
        let out = fake_layer(&mut tape, logits, boxes);
        let (_, b) = set_loss(&mut tape, &[out], &gt, &LossWeights::default()).unwrap();
        assert!(b.total < 1e-12, "{}", b.total);
    }

    #[test]
    fn micro_instance_matches_scalar_recomputation() {
        let w = LossWeights::default();
        let gt = [item(0, 0.5, 0.5, 0.2, 0.2)];
        let logits = [0.2, -0.4, 0.1, 1.3, 0.0, -0.5];
        let boxes = [0.45, 0.55, 0.3, 0.2, 0.52, 0.48, 0.18, 0.22];
        let mut tape = Tape::new();
        let out = fake_layer(
            &mut tape,
            Tensor::new(&[2, 3], logits.to_vec()).unwrap(),
            Tensor::new(&[2, 4], boxes.to_vec()).unwrap(),
        );
        let (_, b) = set_loss(&mut tape, std::slice::from_ref(&out), &gt, &w).unwrap();

        let softmax = |r: &[f64]| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            r.iter().map(|v| v.exp() / z).collect::<Vec<_>>()
        };
        let p0 = softmax(&logits[0..3]);
        let p1 = softmax(&logits[3..6]);
        let bx = |q: usize| BoundingBox::new(boxes[4 * q], boxes[4 * q + 1], boxes[4 * q + 2], boxes[4 * q + 3]);
        let c0 = pair_cost(&p0, &bx(0), &gt[0], &w);
        let c1 = pair_cost(&p1, &bx(1), &gt[0], &w);
        let (m, pm, pu) = if c0 <= c1 { (0, &p0, &p1) } else { (1, &p1, &p0) };
        let ce = (-pm[0].ln() - w.no_object * pu[2].ln()) / (1.0 + w.no_object);
        let bm = bx(m);
        let l1 = (bm.cx - 0.5).abs() + (bm.cy - 0.5).abs() + (bm.w - 0.2).abs() + (bm.h - 0.2).abs();
        let expected = w.cls * ce + w.l1 * l1 + w.giou * (1.0 - giou(&bm, &gt[0].bbox));
        assert!((b.total - expected).abs() < 1e-12, "{} vs {expected}", b.total);
    }

    #[test]
    fn loss_gradients_match_central_differences() {
        let w = LossWeights::default();
        let mut rng = stream(5);
        for case in 0..20 {
            let n = 4;
            let gts: Vec<ItemAnnotation> = (0..rng.random_range(1..=3))
                .map(|_| {
                    item(
                        rng.random_range(0..3),
                        rng.random_range(0.3..0.7),
                        rng.random_range(0.3..0.7),
                        rng.random_range(0.1..0.4),
                        rng.random_range(0.1..0.4),
                    )
                })
                .collect();
            let logits = Tensor::from_fn(&[n, 4], |_| rng.random_range(-2.0..2.0));
            let raw = Tensor::from_fn(&[n, 4], |_| rng.random_range(-1.5..1.5));
            let report = grad_check_many(
                |tape, xs| {
                    let boxes = tape.sigmoid(xs[1]);
                    let out = LayerOutput {
                        logits: xs[0],
                        boxes,
                        relation_weights: None,
                        self_attention: vec![],
                        context: None,
                    };
                    Ok(set_loss(tape, &[out], &gts, &w)?.0)
                },
                &[logits, raw],
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "case {case}: {report:?}");
        }
    }

    #[test]
    fn giou_loss_tape_matches_scalar() {
        let mut rng = stream(8);
        let mut tape = Tape::new();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for _ in 0..10 {
            for v in [&mut a, &mut b] {
                v.extend([
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.05..0.5),
                    rng.random_range(0.05..0.5),
                ]);
            }
        }
        let pa = tape.constant(Tensor::new(&[10, 4], a.clone()).unwrap());
        let pb = tape.constant(Tensor::new(&[10, 4], b.clone()).unwrap());
        let l = giou_loss(&mut tape, pa, pb).unwrap();
        for i in 0..10 {
            let ba = BoundingBox::new(a[4 * i], a[4 * i + 1], a[4 * i + 2], a[4 * i + 3]);
            let bb = BoundingBox::new(b[4 * i], b[4 * i + 1], b[4 * i + 2], b[4 * i + 3]);
            assert!((tape.value(l).data()[i] - (1.0 - giou(&ba, &bb))).abs() < 1e-12);
        }
    }
}
