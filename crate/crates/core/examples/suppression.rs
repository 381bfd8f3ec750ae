//! Greedy NMS, soft-NMS and the full per-image inference filter.

use densedet::geometry::{BBox, Point};
use densedet::ranking::{inference_filter, nms, soft_nms, Candidate, InferenceConfig, ScoredBox, SoftNmsConfig, SoftNmsMethod};

fn sb(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, source_index: usize) -> ScoredBox {
    ScoredBox {
        bbox: BBox::new(x1, y1, x2, y2).unwrap(),
        score,
        source_index,
    }
}

fn main() -> densedet::Result<()> {
    let pool = vec![
        sb(10.0, 10.0, 40.0, 40.0, 0.90, 0),
        sb(12.0, 11.0, 41.0, 42.0, 0.85, 1),
        sb(30.0, 30.0, 60.0, 60.0, 0.80, 2),
        sb(11.0, 10.0, 40.0, 39.0, 0.90, 3),
    ];
    println!("greedy nms @0.5:");
    for b in nms(&pool, 0.5) {
        println!("  #{} score {:.3}", b.source_index, b.score);
    }
    for method in [SoftNmsMethod::Linear, SoftNmsMethod::Gaussian] {
        let cfg = SoftNmsConfig {
            method,
            ..SoftNmsConfig::default()
        };
        println!("soft-nms {method:?}:");
        for b in soft_nms(&pool, &cfg)? {
            println!("  #{} score {:.3}", b.source_index, b.score);
        }
    }

    let cand = |b: &ScoredBox, level| Candidate {
        bbox: b.bbox,
        scores: vec![b.score, 0.3 * b.score],
        level,
        ctr: None,
        location: Point::new(0.5 * (b.bbox.x1 + b.bbox.x2), 0.5 * (b.bbox.y1 + b.bbox.y2)),
        source_index: b.source_index,
    };
    let levels = vec![pool[..2].iter().map(|b| cand(b, 0)).collect(), pool[2..].iter().map(|b| cand(b, 1)).collect()];
    println!("inference filter:");
    for d in inference_filter(&levels, &InferenceConfig::default())? {
        println!("  class {} score {:.3} from #{}", d.class_id, d.score, d.source_index);
    }
    Ok(())
}
