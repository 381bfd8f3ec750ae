//! Label assignment on a two-level grid and the IoU-valued targets built
//! from a set of predicted boxes.

use densedet::assigner::{atss_assign, build_targets, GridSpec, GtObject, DEFAULT_ATSS_TOPK};
use densedet::geometry::BBox;

fn main() -> densedet::Result<()> {
    let grid = GridSpec::for_image(64.0, 64.0, &[4, 8])?;
    let gts = vec![
        GtObject::new(BBox::new(6.0, 8.0, 34.0, 38.0)?, 0)?,
        GtObject::new(BBox::new(34.0, 30.0, 62.0, 60.0)?, 2)?,
    ];
    let assignment = atss_assign(&grid, &gts, DEFAULT_ATSS_TOPK)?;
    let locs = grid.locations();
    println!("{} locations, {} foreground", locs.len(), assignment.num_foreground());
    for (gi, g) in gts.iter().enumerate() {
        let n = assignment.gt_indices().iter().filter(|&&x| x == Some(gi)).count();
        println!("gt {gi} {:?}: {n} positives", g.bbox.to_array());
    }
    for (loc, label) in locs.iter().zip(&assignment.labels) {
        if let Some(a) = label {
            println!(
                "  level {} ({:>4.1}, {:>4.1}) -> gt {} class {}",
                loc.level, loc.point.x, loc.point.y, a.gt_index, a.class_id
            );
        }
    }

    // Pretend every location predicts a box shrunk toward its assigned gt.
    let predicted: Vec<BBox> = locs
        .iter()
        .zip(&assignment.labels)
        .map(|(loc, label)| match label {
            Some(a) => {
                let g = gts[a.gt_index].bbox;
                BBox {
                    x1: 0.5 * (g.x1 + loc.point.x.min(g.x1 + 2.0)),
                    y1: g.y1,
                    x2: g.x2 - 2.0,
                    y2: g.y2,
                }
            }
            None => BBox::new(loc.point.x - 4.0, loc.point.y - 4.0, loc.point.x + 4.0, loc.point.y + 4.0).unwrap(),
        })
        .collect();
    let targets = build_targets(&assignment, &predicted, &gts, 3)?;
    let fg: Vec<_> = targets.iter().filter(|t| t.gt_box.is_some()).take(5).collect();
    for t in fg {
        println!("target {:?} weight {:.3}", t.target.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(), t.q_weight);
    }
    Ok(())
}
