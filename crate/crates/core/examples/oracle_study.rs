//! Replaces predicted quantities by their ground-truth values one at a time
//! and reports the AP each replacement unlocks.

use densedet::harness::experiments::run_oracle_study;
use densedet::harness::{render_report, Config, ExperimentKind, ReportFormat};

fn main() -> densedet::Result<()> {
    let mut cfg = Config::default();
    cfg.experiment.kind = ExperimentKind::Oracle;
    cfg.experiment.oracle_scenes = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let table = run_oracle_study(&cfg)?;
    print!("{}", render_report(&table, ReportFormat::Markdown)?);
    Ok(())
}
