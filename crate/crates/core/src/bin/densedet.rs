use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use densedet::harness::experiments::{run_train, suppress_dump};
use densedet::harness::{render_report, run_experiment, Config, Dataset, ExperimentKind, ReportFormat, ReportTable};
use densedet::ranking::{InferenceConfig, SoftNmsConfig, SoftNmsMethod};
use densedet::trainer::{gradient_check, GradCheckConfig};
use densedet::{Error, Result};

#[derive(Parser)]
#[command(name = "densedet", version, about = "Dense detector losses, assignment, ranking and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Report destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format. Inferred from the `--out` extension when omitted.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one head and report per-epoch loss and held-out AP.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also write the held-out detections dump here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Evaluate a detection dump.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dump to evaluate; overrides `experiment.dump`.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Oracle ranking study.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Compare classification losses over several seeds.
    LossCompare {
        #[command(flatten)]
        common: Common,
    },
    /// Varifocal loss with and without target-score weighting of positives.
    QAblation {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep (gamma, alpha) of the varifocal loss.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Learned refinement against frozen unit scales.
    RefineAblation {
        #[command(flatten)]
        common: Common,
    },
    /// Suppress duplicates in a detection dump and write the surviving detections.
    Nms {
        #[command(flatten)]
        common: Common,
        /// Dump to suppress; overrides `experiment.dump`.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Overrides `ranking.nms_thr`.
        #[arg(long)]
        iou: Option<f64>,
        /// Decay overlapping scores instead of dropping boxes.
        #[arg(long, value_enum)]
        soft: Option<SoftArg>,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long, default_value_t = 1e-3)]
        score_floor: f64,
    },
    /// Finite-difference check of the full head gradient.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SoftArg {
    Linear,
    Gaussian,
}

fn load_config(c: &Common, kind: ExperimentKind) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.experiment.kind = kind;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn format_of(c: &Common) -> Result<ReportFormat> {
    if let Some(f) = &c.format {
        return f.parse();
    }
    match c.out.as_deref().and_then(Path::extension).and_then(|e| e.to_str()) {
        Some(ext) => ext.parse().or(Ok(ReportFormat::Csv)),
        None => Ok(ReportFormat::Markdown),
    }
}

fn write_out(c: &Common, body: &str) -> Result<()> {
    match &c.out {
        Some(p) => std::fs::write(p, body).map_err(|e| Error::io(p, e)),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn emit(c: &Common, table: &ReportTable) -> Result<()> {
    let fmt = format_of(c)?;
    write_out(c, &render_report(table, fmt)?)
}

fn experiment(c: &Common, kind: ExperimentKind, dump: Option<&PathBuf>) -> Result<()> {
    let mut cfg = load_config(c, kind)?;
    if let Some(d) = dump {
        cfg.experiment.dump = Some(d.clone());
        cfg.validate()?;
    }
    emit(c, &run_experiment(&cfg)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, dump } => {
            let cfg = load_config(&common, ExperimentKind::Train)?;
            let run = run_train(&cfg)?;
            if let Some(p) = dump {
                run.dump.write(&p)?;
            }
            emit(&common, &run.table)
        }
        Command::Eval { common, dump } => {
            // Validation of the kind needs the dump, so patch it in before loading checks.
            let mut cfg = match &common.config {
                Some(p) => Config::load(p)?,
                None => Config::default(),
            };
            cfg.experiment.kind = ExperimentKind::Eval;
            if let Some(d) = dump {
                cfg.experiment.dump = Some(d);
            }
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            emit(&common, &run_experiment(&cfg)?)
        }
        Command::Oracle { common, dump } => experiment(&common, ExperimentKind::Oracle, dump.as_ref()),
        Command::LossCompare { common } => experiment(&common, ExperimentKind::LossCompare, None),
        Command::QAblation { common } => experiment(&common, ExperimentKind::QWeightAblation, None),
        Command::Sweep { common } => experiment(&common, ExperimentKind::HyperparamSweep, None),
        Command::RefineAblation { common } => experiment(&common, ExperimentKind::RefineAblation, None),
        Command::Nms {
            common,
            dump,
            iou,
            soft,
            sigma,
            score_floor,
        } => {
            let mut cfg = load_config(&common, ExperimentKind::Train)?;
            if let Some(t) = iou {
                cfg.ranking.nms_thr = t;
                cfg.validate()?;
            }
            let path = dump
                .or(cfg.experiment.dump.clone())
                .ok_or_else(|| Error::Config("nms needs --dump or experiment.dump".into()))?;
            let ds = Dataset::load(&path, cfg.experiment.xywh)?;
            let tc = cfg.train_config();
            let inference = InferenceConfig {
                mode: tc.effective_rank_mode(),
                ..tc.inference
            };
            let soft = soft.map(|m| SoftNmsConfig {
                method: match m {
                    SoftArg::Linear => SoftNmsMethod::Linear,
                    SoftArg::Gaussian => SoftNmsMethod::Gaussian,
                },
                iou_thr: cfg.ranking.nms_thr,
                sigma,
                score_floor,
            });
            let out = suppress_dump(&ds, &inference, soft.as_ref())?;
            write_out(&common, &(out.to_json_string()? + "\n"))
        }
        Command::GradCheck {
            common,
            samples,
            tolerance,
        } => {
            let cfg = load_config(&common, ExperimentKind::Train)?;
            let gc = GradCheckConfig {
                seed: cfg.train.seed,
                samples,
                tolerance,
                ..GradCheckConfig::default()
            };
            let r = gradient_check(&gc)?;
            let mut t = ReportTable::new("gradient check", &["samples", "failures", "max_rel_err", "skipped_kinks"], &cfg);
            t.push(
                "head",
                vec![r.samples as f64, r.failures as f64, r.max_rel_err, r.skipped_kinks as f64],
            );
            emit(&common, &t)?;
            if r.passed(tolerance) {
                Ok(())
            } else {
                Err(Error::Divergence(format!(
                    "{} of {} gradient samples exceed {tolerance:e} (max rel err {:e})",
                    r.failures, r.samples, r.max_rel_err
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("densedet: {e}");
            ExitCode::from(match &e {
                Error::Divergence(_) => 3,
                e if e.is_validation() => 2,
                _ => 1,
            })
        }
    }
}
