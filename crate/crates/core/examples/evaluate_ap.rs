//! COCO-style AP and ambiguous-pair accuracy on hand-made detections.
use holi::corpus::BoundingBox;
use holi::eval::{ambiguous_accuracy, average_precision, Detection, GroundTruth};

fn main() {
    let gt = |scene: &str, class_id, cx| GroundTruth { scene: scene.into(), class_id, bbox: BoundingBox::new(cx, 0.6, 0.2, 0.3) };
    let det = |scene: &str, class_id, cx, confidence| Detection { scene: scene.into(), class_id, bbox: BoundingBox::new(cx, 0.6, 0.2, 0.3), confidence };
    let gts = vec![gt("a", 6, 0.5), gt("b", 7, 0.5), gt("b", 10, 0.2)];
    // one skirt length swapped, one shoe slightly off
    let dets = vec![det("a", 6, 0.5, 0.9), det("b", 6, 0.5, 0.8), det("b", 10, 0.23, 0.7)];
    for thr in [0.5, 0.75] {
        println!("AP@{thr} = {:.2}", 100.0 * average_precision(&dets, &gts, thr));
    }
    let a = ambiguous_accuracy(&dets, &gts);
    println!("ambiguous: {}/{} = {:.1}% [{:.1}, {:.1}]", a.correct, a.matched, a.accuracy, a.ci_low, a.ci_high);
}
