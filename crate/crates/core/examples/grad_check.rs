//! Central-difference check of the hand-written backward pass through the
//! whole head, plus a single-kernel check for comparison.

use densedet::losses::varifocal_loss;
use densedet::trainer::{gradient_check, GradCheckConfig};

fn main() -> densedet::Result<()> {
    let (p, q, h) = (0.3, 0.6, 1e-6);
    let (_, analytic) = varifocal_loss(p, q, 0.75, 2.0, true)?;
    let numeric = (varifocal_loss(p + h, q, 0.75, 2.0, true)?.0 - varifocal_loss(p - h, q, 0.75, 2.0, true)?.0) / (2.0 * h);
    println!("vfl dL/dp at ({p}, {q}): analytic {analytic:.9} numeric {numeric:.9}");

    let cfg = GradCheckConfig {
        samples: 200,
        ..GradCheckConfig::default()
    };
    let r = gradient_check(&cfg)?;
    println!(
        "head: {} samples, max rel err {:.2e}, {} above {:.0e}, {} draws on kinks redrawn",
        r.samples, r.max_rel_err, r.failures, cfg.tolerance, r.skipped_kinks
    );
    Ok(())
}
