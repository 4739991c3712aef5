//! Per-query context tensors: co-occurrence gathers, item-item geometry and
//! item-to-body-joint geometry.
//!
//! All tensors are `N x N x C`, row-major with the channel innermost.

use serde::{Deserialize, Serialize};

use crate::corpus::{BoundingBox, KeypointKind, Keypoints};
use crate::error::{Error, Result};
use crate::stats::CooccurrenceStats;

/// Every relation channel is clamped to `[-CLAMP, CLAMP]`.
pub const CLAMP: f64 = 20.0;
/// Floor for ratio denominators.
pub const EPS: f64 = 1e-6;

pub const CO_CHANNELS: usize = 3;
pub const POS_CHANNELS: usize = 4;
pub const HUMAN_CHANNELS: usize = 4;

/// Which context branches are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Branches {
    /// item-item co-occurrence
    pub co: bool,
    /// item-item relative position
    pub pos: bool,
    /// item-human relative position
    pub kp: bool,
}

impl Branches {
    pub const NONE: Branches = Branches {
        co: false,
        pos: false,
        kp: false,
    };
    pub const ALL: Branches = Branches {
        co: true,
        pos: true,
        kp: true,
    };

    pub fn any(self) -> bool {
        self.co || self.pos || self.kp
    }

    /// Parses `"co,kp"`, `"co+pos"`, `"none"` or `"all"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut b = Branches::NONE;
        let spec = spec.trim();
        if spec == "none" || spec == "baseline" || spec.is_empty() {
            return Ok(b);
        }
        if spec == "all" {
            return Ok(Branches::ALL);
        }
        for part in spec.split([',', '+']) {
            match part.trim() {
                "co" => b.co = true,
                "pos" => b.pos = true,
                "kp" => b.kp = true,
                other => return Err(Error::Config(format!("unknown branch `{other}` (co, pos, kp)"))),
            }
        }
        Ok(b)
    }

    /// `"co+kp"`, or `"none"`.
    pub fn tag(self) -> String {
        let parts: Vec<&str> = [(self.co, "co"), (self.pos, "pos"), (self.kp, "kp")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// Predicted classes and boxes for the `N` queries. Class `N_c` is no-object.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryState {
    pub class_ids: Vec<usize>,
    pub boxes: Vec<BoundingBox>,
}

impl QueryState {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextMatrices {
    pub n: usize,
    pub co: Vec<f64>,
    pub pos: Vec<f64>,
    pub human: Vec<f64>,
}

impl ContextMatrices {
    pub fn zeros(n: usize) -> Self {
        ContextMatrices {
            n,
            co: vec![0.0; n * n * CO_CHANNELS],
            pos: vec![0.0; n * n * POS_CHANNELS],
            human: vec![0.0; n * n * HUMAN_CHANNELS],
        }
    }

    pub fn co_at(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.n + j) * CO_CHANNELS;
        &self.co[o..o + CO_CHANNELS]
    }

    pub fn pos_at(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.n + j) * POS_CHANNELS;
        &self.pos[o..o + POS_CHANNELS]
    }

    pub fn human_at(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.n + j) * HUMAN_CHANNELS;
        &self.human[o..o + HUMAN_CHANNELS]
    }

    pub fn all_finite(&self) -> bool {
        self.co.iter().chain(&self.pos).chain(&self.human).all(|v| v.is_finite())
    }
}

fn floor_abs(d: f64) -> f64 {
    if d.abs() >= EPS {
        d
    } else if d < 0.0 {
        -EPS
    } else {
        EPS
    }
}

fn guard(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-CLAMP, CLAMP)
    }
}

/// `R_C[i,j] = [R_nc, R_pcc, R_tanh_pmi][c_i, c_j]`; pairs touching no-object are zero.
pub fn gather_item_cooccurrence(q: &QueryState, stats: &CooccurrenceStats) -> Result<Vec<f64>> {
    let nc = stats.num_classes();
    let n = q.len();
    for &c in &q.class_ids {
        if c > nc {
            return Err(Error::Index {
                what: "class table (plus no-object)",
                index: c,
                size: nc + 1,
            });
        }
    }
    let mut out = vec![0.0; n * n * CO_CHANNELS];
    for (i, &ci) in q.class_ids.iter().enumerate() {
        for (j, &cj) in q.class_ids.iter().enumerate() {
            if ci == nc || cj == nc {
                continue;
            }
            let o = (i * n + j) * CO_CHANNELS;
            out[o..o + CO_CHANNELS].copy_from_slice(&stats.triple(ci, cj));
        }
    }
    Ok(out)
}

/// Unclamped `[(x_i-x_j)/w_i, (y_i-y_j)/h_i, w_i/w_j, h_i/h_j]`.
pub fn relpos_raw(bi: &BoundingBox, bj: &BoundingBox) -> [f64; 4] {
    [
        (bi.cx - bj.cx) / bi.w.max(EPS),
        (bi.cy - bj.cy) / bi.h.max(EPS),
        bi.w / bj.w.max(EPS),
        bi.h / bj.h.max(EPS),
    ]
}

pub fn item_item_relpos(boxes: &[BoundingBox]) -> Vec<f64> {
    let n = boxes.len();
    let mut out = vec![0.0; n * n * POS_CHANNELS];
    for (i, bi) in boxes.iter().enumerate() {
        for (j, bj) in boxes.iter().enumerate() {
            let o = (i * n + j) * POS_CHANNELS;
            for (d, v) in out[o..o + POS_CHANNELS].iter_mut().zip(relpos_raw(bi, bj)) {
                *d = guard(v);
            }
        }
    }
    out
}

/// `(y_i - y_k) / (y_j - y_k)` per joint, zero where the averaged score is below `theta`.
pub fn item_human_relpos(boxes: &[BoundingBox], kp: &Keypoints, theta: f64) -> Vec<f64> {
    let n = boxes.len();
    let mut out = vec![0.0; n * n * HUMAN_CHANNELS];
    for kind in KeypointKind::ALL {
        let k = kind.index();
        let Some([_, yk]) = kp.point(kind) else {
            continue;
        };
        if kp.score(kind) < theta || !yk.is_finite() {
            continue;
        }
        for (i, bi) in boxes.iter().enumerate() {
            for (j, bj) in boxes.iter().enumerate() {
                let v = (bi.cy - yk) / floor_abs(bj.cy - yk);
                out[(i * n + j) * HUMAN_CHANNELS + k] = guard(v);
            }
        }
    }
    out
}

/// The three tensors; disabled branches are zero. `stats` is required only for `co`.
pub fn build_context(
    q: &QueryState,
    stats: Option<&CooccurrenceStats>,
    kp: &Keypoints,
    theta: f64,
    branches: Branches,
) -> Result<ContextMatrices> {
    if q.boxes.len() != q.class_ids.len() {
        return Err(Error::Shape {
            op: "build_context",
            lhs: vec![q.class_ids.len()],
            rhs: vec![q.boxes.len()],
        });
    }
    let mut ctx = ContextMatrices::zeros(q.len());
    if branches.co {
        let stats = stats.ok_or_else(|| Error::Config("co-occurrence branch needs statistics".into()))?;
        ctx.co = gather_item_cooccurrence(q, stats)?;
    }
    if branches.pos {
        ctx.pos = item_item_relpos(&q.boxes);
    }
    if branches.kp {
        ctx.human = item_human_relpos(&q.boxes, kp, theta);
    }
    Ok(ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, KeypointPair};
    use crate::stats::accumulate_cooccurrence;

    fn hand_stats() -> CooccurrenceStats {
        let c = Corpus::from_class_sets(4, &[&[1, 2], &[1, 3], &[1, 2]]);
        CooccurrenceStats::from_counts(accumulate_cooccurrence(&c).unwrap(), c.class_names)
    }

    fn kp_with(kind: KeypointKind, y: f64, score: f64) -> Keypoints {
        let mut kp = Keypoints::default();
        kp.pairs[kind.index()] = Some(KeypointPair {
            left: [0.4, y],
            right: [0.6, y],
            score_left: score,
            score_right: score,
        });
        kp
    }

    #[test]
    fn gather_hand_pair() {
        let s = hand_stats();
        let q = QueryState {
            class_ids: vec![1, 2],
            boxes: vec![BoundingBox::new(0.5, 0.5, 0.1, 0.1); 2],
        };
        let rc = gather_item_cooccurrence(&q, &s).unwrap();
        assert_eq!(rc[CO_CHANNELS], 1.0 / 3.0);
        assert_eq!(rc[2 * CO_CHANNELS], 1.0 / 2.0);
    }

    #[test]
    fn gather_same_class_everywhere() {
        let s = hand_stats();
        let q = QueryState {
            class_ids: vec![2; 3],
            boxes: vec![BoundingBox::new(0.5, 0.5, 0.1, 0.1); 3],
        };
        let rc = gather_item_cooccurrence(&q, &s).unwrap();
        let expected = [2.0 / 4.0, 1.0, (3.0f64 / 2.0).ln().tanh()];
        for cell in rc.chunks_exact(3) {
            for (a, b) in cell.iter().zip(expected) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gather_sentinel_and_out_of_range() {
        let s = hand_stats();
        let q = QueryState {
            class_ids: vec![4, 4],
            boxes: vec![BoundingBox::new(0.5, 0.5, 0.1, 0.1); 2],
        };
        assert!(gather_item_cooccurrence(&q, &s).unwrap().iter().all(|&v| v == 0.0));
        let bad = QueryState {
            class_ids: vec![5, 1],
            ..q
        };
        assert!(matches!(gather_item_cooccurrence(&bad, &s), Err(Error::Index { .. })));
    }

    #[test]
    fn relpos_cases() {
        let b = BoundingBox::new(0.5, 0.5, 0.2, 0.4);
        assert_eq!(relpos_raw(&b, &b), [0.0, 0.0, 1.0, 1.0]);
        let r = relpos_raw(&b, &BoundingBox::new(0.3, 0.1, 0.1, 0.2));
        for (a, e) in r.iter().zip([1.0, 1.0, 2.0, 2.0]) {
            assert!((a - e).abs() < 1e-12);
        }
        let rp = item_item_relpos(&[b, BoundingBox::new(0.3, 0.1, 0.0, 0.2)]);
        assert_eq!(rp[POS_CHANNELS + 2], CLAMP);
    }

    #[test]
    fn human_gate_and_hand_case() {
        let boxes = [BoundingBox::new(0.5, 0.8, 0.1, 0.1), BoundingBox::new(0.5, 0.5, 0.1, 0.1)];
        let rs = item_human_relpos(&boxes, &kp_with(KeypointKind::Knee, 0.7, 0.2), 0.3);
        assert!(rs.iter().all(|&v| v == 0.0));
        let rs = item_human_relpos(&boxes, &kp_with(KeypointKind::Ankle, 0.9, 1.0), 0.3);
        let v = rs[HUMAN_CHANNELS + KeypointKind::Ankle.index()];
        assert!((v - 0.25).abs() < 1e-12);
        assert_eq!(rs[KeypointKind::Ankle.index()], 1.0);
    }

    #[test]
    fn human_zero_denominator_uses_signed_floor() {
        let boxes = [BoundingBox::new(0.5, 0.6, 0.1, 0.1), BoundingBox::new(0.5, 0.5, 0.1, 0.1)];
        let rs = item_human_relpos(&boxes, &kp_with(KeypointKind::Hip, 0.5, 0.9), 0.3);
        assert_eq!(rs[HUMAN_CHANNELS + KeypointKind::Hip.index()], CLAMP);
    }

    #[test]
    fn disabled_branches_are_zero() {
        let q = QueryState {
            class_ids: vec![1, 2, 3],
            boxes: vec![
                BoundingBox::new(0.2, 0.3, 0.1, 0.2),
                BoundingBox::new(0.5, 0.5, 0.3, 0.1),
                BoundingBox::new(0.7, 0.9, 0.2, 0.05),
            ],
        };
        let kp = kp_with(KeypointKind::Knee, 0.7, 0.9);
        let ctx = build_context(&q, Some(&hand_stats()), &kp, 0.3, Branches::NONE).unwrap();
        assert_eq!(ctx, ContextMatrices::zeros(3));
        assert!(build_context(&q, None, &kp, 0.3, Branches::ALL).is_err());
    }

    #[test]
    fn branch_parse_and_tag() {
        assert_eq!(Branches::parse("co+kp").unwrap().tag(), "co+kp");
        assert_eq!(Branches::parse("kp,co").unwrap().tag(), "co+kp");
        assert_eq!(Branches::parse("none").unwrap(), Branches::NONE);
        assert!(Branches::parse("depth").is_err());
    }
}
