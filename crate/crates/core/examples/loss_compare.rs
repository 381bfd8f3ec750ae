//! Focal, varifocal and quality focal losses trained on the same seeds.
//! Fewer epochs than the benchmark default so it finishes quickly.

use densedet::harness::experiments::run_loss_compare;
use densedet::harness::{render_report, Config, ExperimentKind, ReportFormat};

fn main() -> densedet::Result<()> {
    let mut cfg = Config::default();
    cfg.experiment.kind = ExperimentKind::LossCompare;
    cfg.experiment.seeds = vec![0, 1];
    cfg.train.epochs = 10;
    let table = run_loss_compare(&cfg)?;
    print!("{}", render_report(&table, ReportFormat::Csv)?);
    for v in ["vfl", "fl", "qfl"] {
        println!("{v}: mean AP {:.4}", table.value(v, "ap").unwrap_or(f64::NAN));
    }
    Ok(())
}
