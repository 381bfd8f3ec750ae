//! COCO-style AP on a hand-made two-image set, including the per-threshold
//! breakdown.

use densedet::assigner::GtObject;
use densedet::eval::{coco_ap_with, iou_thresholds, DetectionRecord, EvalImage, EvalOptions};
use densedet::geometry::BBox;

fn main() -> densedet::Result<()> {
    let b = |x1, y1, x2, y2| BBox::new(x1, y1, x2, y2).unwrap();
    let images = vec![
        EvalImage {
            image_id: 0,
            gts: vec![GtObject::new(b(0.0, 0.0, 10.0, 10.0), 0)?, GtObject::new(b(20.0, 20.0, 60.0, 50.0), 1)?],
        },
        EvalImage {
            image_id: 1,
            gts: vec![GtObject::new(b(5.0, 5.0, 45.0, 45.0), 0)?],
        },
    ];
    let det = |image_id, bbox, class_id, score| DetectionRecord {
        image_id,
        bbox,
        class_id,
        score,
    };
    let dets = vec![
        // IoU 0.6 with its ground truth.
        det(0, b(0.0, 0.0, 10.0, 6.0), 0, 0.9),
        det(0, b(21.0, 20.0, 60.0, 51.0), 1, 0.8),
        det(1, b(6.0, 4.0, 44.0, 46.0), 0, 0.7),
        det(1, b(50.0, 50.0, 60.0, 60.0), 0, 0.95),
    ];
    let s = coco_ap_with(
        &dets,
        &images,
        2,
        &EvalOptions {
            size_buckets: true,
            ..EvalOptions::default()
        },
    )?;
    println!("AP {:.4}  AP50 {:.4}  AP75 {:.4}", s.ap, s.ap50, s.ap75);
    for (t, ap) in iou_thresholds().iter().zip(&s.per_threshold) {
        println!("  @{t:.2}: {ap:.4}");
    }
    println!("small {:?} medium {:?} large {:?}", s.ap_small, s.ap_medium, s.ap_large);
    Ok(())
}
