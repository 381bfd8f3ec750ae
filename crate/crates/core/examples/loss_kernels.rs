//! Classification loss kernels side by side over a sweep of predicted
//! probabilities, for a background target and an IoU-valued positive.

use densedet::losses::{focal_loss, quality_focal_loss, varifocal_loss, LossConfig};

fn main() -> densedet::Result<()> {
    let cfg = LossConfig::default();
    println!("background (q = 0)");
    println!("{:>5} {:>10} {:>10} {:>10}", "p", "fl", "vfl", "qfl");
    for p in [0.05, 0.2, 0.5, 0.8, 0.95] {
        println!(
            "{p:>5} {:>10.5} {:>10.5} {:>10.5}",
            focal_loss(p, false, cfg.fl_alpha, cfg.gamma).0,
            varifocal_loss(p, 0.0, cfg.alpha, cfg.gamma, true)?.0,
            quality_focal_loss(p, 0.0, cfg.beta_qfl)?.0,
        );
    }

    let q = 0.7;
    println!("\nforeground (q = {q})");
    println!("{:>5} {:>10} {:>10} {:>12} {:>10}", "p", "fl", "vfl", "vfl plain", "qfl");
    for p in [0.05, 0.2, 0.5, 0.7, 0.95] {
        let (v, dv) = varifocal_loss(p, q, cfg.alpha, cfg.gamma, true)?;
        println!(
            "{p:>5} {:>10.5} {:>10.5} {:>12.5} {:>10.5}   dvfl/dp {dv:+.4}",
            focal_loss(p, true, cfg.fl_alpha, cfg.gamma).0,
            v,
            varifocal_loss(p, q, cfg.alpha, cfg.gamma, false)?.0,
            quality_focal_loss(p, q, cfg.beta_qfl)?.0,
        );
    }
    Ok(())
}
