//! Box encodings around a grid location: distances, star points,
//! centerness, refinement and the GIoU loss.

use densedet::geometry::{
    centerness, decode_distances, encode_distances, giou, giou_loss, iou, refine, star_points, BBox, Point,
    RefineScales,
};

fn main() -> densedet::Result<()> {
    let gt = BBox::new(10.0, 12.0, 42.0, 36.0)?;
    let p = Point::new(20.0, 20.0);

    let dv = encode_distances(p, &gt)?;
    println!("distances (l, t, r, b) = {:?}", dv.to_array());
    println!("centerness at {p:?} = {:.4}", centerness(&dv));
    println!("decoded back: {:?}", decode_distances(p, &dv).to_array());

    let initial = decode_distances(p, &densedet::geometry::DistanceVector::new(8.0, 6.0, 20.0, 14.0)?);
    println!("\ninitial box {:?}", initial.to_array());
    println!("  iou {:.4}  giou {:.4}", iou(&initial, &gt), giou(&initial, &gt));
    for (i, s) in star_points(p, &encode_distances(p, &initial)?).as_slice().iter().enumerate() {
        println!("  star point {i}: ({:.1}, {:.1})", s.x, s.y);
    }

    let init_dv = encode_distances(p, &initial)?;
    let scales = RefineScales::new(
        dv.l / init_dv.l,
        dv.t / init_dv.t,
        dv.r / init_dv.r,
        dv.b / init_dv.b,
    )?;
    let refined = decode_distances(p, &refine(&init_dv, &scales));
    println!("\nper-side scales {:?} recover {:?}", scales.to_array(), refined.to_array());

    let (loss, grad) = giou_loss(&initial, &gt);
    println!("giou loss of the initial box {loss:.4}, d/d[x1 y1 x2 y2] = {grad:.4?}");
    Ok(())
}
