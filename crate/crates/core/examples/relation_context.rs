//! The three relation tensors for a skirt and a shoe next to a pose.
use holi::corpus::{BoundingBox, KeypointKind, KeypointPair, Keypoints, NUM_CLASSES};
use holi::corpus::Corpus;
use holi::relate::{build_context, Branches, QueryState};
use holi::stats::CooccurrenceStats;

fn main() -> holi::Result<()> {
    let stats = CooccurrenceStats::from_corpus(&Corpus::from_class_sets(NUM_CLASSES, &[&[3, 6, 10], &[3, 7, 11], &[3, 6, 10]]))?;
    let mut kp = Keypoints::default();
    for (kind, y, s) in [(KeypointKind::Hip, 0.45, 0.9), (KeypointKind::Knee, 0.65, 0.9), (KeypointKind::Ankle, 0.85, 0.2)] {
        kp.pairs[kind.index()] = Some(KeypointPair { left: [0.45, y], right: [0.55, y], score_left: s, score_right: s });
    }
    let q = QueryState {
        class_ids: vec![6, 10],
        boxes: vec![BoundingBox::new(0.5, 0.6, 0.3, 0.25), BoundingBox::new(0.5, 0.9, 0.15, 0.06)],
    };
    let c = build_context(&q, Some(&stats), &kp, 0.3, Branches::ALL)?;
    println!("R_C(skirt, flats) = {:?}", c.co_at(0, 1));
    println!("R_P(skirt, flats) = {:?}", c.pos_at(0, 1));
    // ankle confidence 0.2 is below the gate, so its channel stays zero
    println!("R_S(skirt, flats) = {:?}", c.human_at(0, 1));
    Ok(())
}
