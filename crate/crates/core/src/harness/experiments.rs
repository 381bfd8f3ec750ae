//! Experiment drivers. Each returns a [`ReportTable`] whose metadata embeds
//! the resolved config; re-running that config reproduces every cell.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::eval::{coco_ap_with, DetectionRecord, EvalImage, EvalOptions, EvalSummary};
use crate::geometry::{iou, BBox};
use crate::harness::config::{Config, ExperimentKind};
use crate::harness::dataset::{AnnotationEntry, Dataset, DetectionEntry, ImageEntry};
use crate::harness::report::ReportTable;
use crate::losses::LossVariant;
use crate::ranking::{
    apply_oracle, inference_filter, nms, soft_nms, Candidate, InferenceConfig, OracleMode, RankMode, ScoredBox,
    SoftNmsConfig,
};
use crate::trainer::train::{
    eval_images, predict_candidates, prepare_scenes, train, train_on, PreparedScene, Stream, TrainConfig,
    TrainOutcome,
};

pub const SUMMARY_COLUMNS: [&str; 3] = ["ap", "ap50", "ap75"];
pub const SEED_COLUMNS: [&str; 5] = ["ap", "ap50", "ap75", "runs", "failed"];

fn summary_row(s: &EvalSummary) -> Vec<f64> {
    vec![s.ap, s.ap50, s.ap75]
}

/// Result of a single training run together with its held-out detections.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub table: ReportTable,
    pub dump: Dataset,
}

/// Builds the dump of held-out ground truth and final detections.
pub fn detections_dump(scenes: &[PreparedScene], dets: &[DetectionRecord]) -> Dataset {
    let images = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| ImageEntry {
            id: i as u64,
            width: s.scene.width,
            height: s.scene.height,
        })
        .collect();
    let annotations = scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.gts.iter().map(move |g| AnnotationEntry {
                image_id: i as u64,
                bbox: g.bbox.to_array(),
                class_id: g.class_id,
            })
        })
        .collect();
    let detections = dets
        .iter()
        .map(|d| DetectionEntry {
            image_id: d.image_id,
            bbox: d.bbox.to_array(),
            class_id: Some(d.class_id),
            score: Some(d.score),
            ..Default::default()
        })
        .collect();
    Dataset {
        images,
        annotations,
        detections,
    }
}

/// Trains one head; the table lists per-epoch loss and held-out AP.
pub fn run_train(cfg: &Config) -> Result<TrainRun> {
    let tc = cfg.train_config();
    tc.validate()?;
    let train_set = prepare_scenes(&tc, Stream::TrainScenes, tc.train_scenes)?;
    let eval_set = prepare_scenes(&tc, Stream::EvalScenes, tc.eval_scenes)?;
    let outcome = train_on(&tc, &train_set, &eval_set)?;
    let (_, dets) = crate::trainer::train::evaluate(&outcome.head, &tc.grid()?, &eval_set, &tc)?;
    let mut table = ReportTable::new(
        format!("train {} seed {}", tc.loss.variant.name(), tc.seed),
        &["loss", "ap", "ap50", "ap75"],
        cfg,
    );
    for m in &outcome.history {
        table.push(format!("epoch {}", m.epoch), vec![m.mean_loss, m.ap, m.ap50, m.ap75]);
    }
    let f = &outcome.final_eval;
    let last_loss = outcome.history.last().map_or(0.0, |m| m.mean_loss);
    table.push("final", vec![last_loss, f.ap, f.ap50, f.ap75]);
    Ok(TrainRun {
        dump: detections_dump(&eval_set, &dets),
        outcome,
        table,
    })
}

/// AP of a dump. Final detections are scored directly; raw candidates go
/// through the inference filter first.
pub fn evaluate_dump(ds: &Dataset, num_classes: usize, inference: &InferenceConfig, opts: &EvalOptions) -> Result<EvalSummary> {
    let images = ds.eval_images();
    if images.is_empty() {
        return Err(Error::invalid("dump", "no images, so no ground truth to evaluate against"));
    }
    let mut dets = ds.detection_records();
    for (image_id, (cands, _)) in ds.candidates() {
        for d in inference_filter(&by_level(cands), inference)? {
            dets.push(DetectionRecord {
                image_id,
                bbox: d.bbox,
                class_id: d.class_id,
                score: d.score,
            });
        }
    }
    coco_ap_with(&dets, &images, num_classes, opts)
}

/// Duplicate suppression over a dump. Candidate records go through the full
/// inference filter. Final detections are suppressed per (image, class),
/// with hard NMS at `inference.nms_thr` unless `soft` is given. The result
/// holds final detections only.
pub fn suppress_dump(ds: &Dataset, inference: &InferenceConfig, soft: Option<&SoftNmsConfig>) -> Result<Dataset> {
    let mut groups: BTreeMap<(u64, usize), Vec<ScoredBox>> = BTreeMap::new();
    for (i, d) in ds.detections.iter().enumerate() {
        if let (Some(c), Some(s)) = (d.class_id, d.score) {
            groups.entry((d.image_id, c)).or_default().push(ScoredBox {
                bbox: BBox::from_array(d.bbox),
                score: s,
                source_index: d.source_index.unwrap_or(i),
            });
        }
    }
    let mut detections = Vec::new();
    for ((image_id, class_id), pool) in groups {
        let kept = match soft {
            Some(cfg) => soft_nms(&pool, cfg)?,
            None => nms(&pool, inference.nms_thr),
        };
        detections.extend(kept.into_iter().map(|b| DetectionEntry {
            image_id,
            bbox: b.bbox.to_array(),
            class_id: Some(class_id),
            score: Some(b.score),
            source_index: Some(b.source_index),
            ..Default::default()
        }));
    }
    for (image_id, (cands, _)) in ds.candidates() {
        for d in inference_filter(&by_level(cands), inference)? {
            detections.push(DetectionEntry {
                image_id,
                bbox: d.bbox.to_array(),
                class_id: Some(d.class_id),
                score: Some(d.score),
                source_index: Some(d.source_index),
                ..Default::default()
            });
        }
    }
    Ok(Dataset {
        images: ds.images.clone(),
        annotations: ds.annotations.clone(),
        detections,
    })
}

fn by_level(cands: Vec<Candidate>) -> Vec<Vec<Candidate>> {
    let n = cands.iter().map(|c| c.level + 1).max().unwrap_or(0);
    let mut levels = vec![Vec::new(); n];
    for c in cands {
        levels[c.level].push(c);
    }
    levels
}

pub fn run_eval(cfg: &Config) -> Result<ReportTable> {
    let path = cfg
        .experiment
        .dump
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs experiment.dump".into()))?;
    let ds = Dataset::load(path, cfg.experiment.xywh)?;
    let tc = cfg.train_config();
    let inference = InferenceConfig {
        mode: tc.effective_rank_mode(),
        ..tc.inference
    };
    let opts = EvalOptions {
        size_buckets: cfg.experiment.size_buckets,
        ..EvalOptions::default()
    };
    let s = evaluate_dump(&ds, tc.scene.num_classes, &inference, &opts)?;
    let mut cols = SUMMARY_COLUMNS.to_vec();
    let mut row = summary_row(&s);
    if cfg.experiment.size_buckets {
        cols.extend(["ap_small", "ap_medium", "ap_large"]);
        // A bucket without ground truth has no AP; reported as -1.
        row.extend([s.ap_small, s.ap_medium, s.ap_large].map(|v| v.unwrap_or(-1.0)));
    }
    let mut t = ReportTable::new(format!("eval {}", path.display()), &cols, cfg);
    t.push("dump", row);
    Ok(t)
}

/// Candidates of one image with the ground-truth association of every
/// candidate, both grouped by level.
#[derive(Clone, Debug, PartialEq)]
pub struct OraclePool {
    pub image: EvalImage,
    pub levels: Vec<Vec<Candidate>>,
    pub assoc: Vec<Vec<Option<usize>>>,
}

/// The ten oracle configurations: `(mode, with_ctr)`.
pub const ORACLE_GRID: [(OracleMode, bool); 10] = [
    (OracleMode::None, false),
    (OracleMode::None, true),
    (OracleMode::GtCtr, true),
    (OracleMode::GtCtrIou, true),
    (OracleMode::GtBbox, false),
    (OracleMode::GtBbox, true),
    (OracleMode::GtCls, false),
    (OracleMode::GtCls, true),
    (OracleMode::GtClsIou, false),
    (OracleMode::GtClsIou, true),
];

pub fn oracle_label(mode: OracleMode, with_ctr: bool) -> String {
    format!("{}{}", mode.name(), if with_ctr { "+ctr" } else { "" })
}

/// AP of the pools after oracle replacement.
pub fn oracle_ap(
    pools: &[OraclePool],
    mode: OracleMode,
    with_ctr: bool,
    inference: &InferenceConfig,
    num_classes: usize,
) -> Result<EvalSummary> {
    let inf = InferenceConfig {
        mode: if with_ctr { RankMode::ClsTimesCtr } else { RankMode::Cls },
        ..*inference
    };
    let mut dets = Vec::new();
    for p in pools {
        let gts = &p.image.gts;
        let levels = p
            .levels
            .iter()
            .zip(&p.assoc)
            .map(|(c, a)| apply_oracle(c, gts, a, mode))
            .collect::<Result<Vec<_>>>()?;
        for d in inference_filter(&levels, &inf)? {
            dets.push(DetectionRecord {
                image_id: p.image.image_id,
                bbox: d.bbox,
                class_id: d.class_id,
                score: d.score,
            });
        }
    }
    let images: Vec<EvalImage> = pools.iter().map(|p| p.image.clone()).collect();
    coco_ap_with(&dets, &images, num_classes, &EvalOptions::default())
}

pub fn oracle_table(pools: &[OraclePool], cfg: &Config, title: &str) -> Result<ReportTable> {
    let tc = cfg.train_config();
    let mut t = ReportTable::new(title, &SUMMARY_COLUMNS, cfg);
    for (mode, ctr) in ORACLE_GRID {
        let s = oracle_ap(pools, mode, ctr, &tc.inference, tc.scene.num_classes)?;
        t.push(oracle_label(mode, ctr), summary_row(&s));
    }
    Ok(t)
}

/// The centerness baseline used by the oracle study: focal loss with a
/// centerness branch, everything else from `cfg`.
pub fn oracle_baseline_config(cfg: &Config) -> TrainConfig {
    let mut tc = cfg.train_config();
    tc.ctr_branch = true;
    tc.loss.variant = LossVariant::Fl;
    tc
}

/// Pools from a trained head; association is the label assignment.
pub fn head_pools(outcome: &TrainOutcome, tc: &TrainConfig, scenes: &[PreparedScene]) -> Result<Vec<OraclePool>> {
    let grid = tc.grid()?;
    let images = eval_images(scenes);
    scenes
        .iter()
        .zip(images)
        .map(|(s, image)| {
            let levels = predict_candidates(&outcome.head, &grid, &s.features)?;
            let flat = s.assignment.gt_indices();
            let assoc = levels
                .iter()
                .map(|l| l.iter().map(|c| flat[c.source_index]).collect())
                .collect();
            Ok(OraclePool { image, levels, assoc })
        })
        .collect()
}

/// Minimum IoU for associating an unlabeled dump candidate with a ground truth.
pub const DUMP_ASSOC_IOU: f64 = 0.5;

/// Pools from a dump. When the dump carries `assigned_gt` anywhere it is taken
/// as the full assignment (absent means background); otherwise candidates are
/// associated with their highest-IoU ground truth when that IoU reaches
/// `DUMP_ASSOC_IOU`.
pub fn dump_pools(ds: &Dataset) -> Vec<OraclePool> {
    let images = ds.eval_images();
    let labeled = ds.detections.iter().any(|d| d.assigned_gt.is_some());
    let mut cands = ds.candidates();
    images
        .into_iter()
        .map(|image| {
            let (cs, assigned) = cands.remove(&image.image_id).unwrap_or_default();
            let assoc: Vec<Option<usize>> = cs
                .iter()
                .zip(assigned)
                .map(|(c, a)| {
                    if labeled {
                        return a;
                    }
                    a.or_else(|| {
                        image
                            .gts
                            .iter()
                            .enumerate()
                            .map(|(i, g)| (i, iou(&c.bbox, &g.bbox)))
                            .filter(|&(_, v)| v >= DUMP_ASSOC_IOU)
                            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                            .map(|(i, _)| i)
                    })
                })
                .collect();
            let n = cs.iter().map(|c| c.level + 1).max().unwrap_or(0);
            let mut levels = vec![Vec::new(); n];
            let mut lassoc = vec![Vec::new(); n];
            for (c, a) in cs.into_iter().zip(assoc) {
                lassoc[c.level].push(a);
                levels[c.level].push(c);
            }
            OraclePool {
                image,
                levels,
                assoc: lassoc,
            }
        })
        .collect()
}

/// Oracle replacement study. With `experiment.dump` set the candidates come
/// from the dump; otherwise a centerness baseline is trained and evaluated on
/// `experiment.oracle_scenes` held-out scenes.
pub fn run_oracle_study(cfg: &Config) -> Result<ReportTable> {
    if let Some(path) = &cfg.experiment.dump {
        let ds = Dataset::load(path, cfg.experiment.xywh)?;
        if ds.annotations.is_empty() {
            return Err(Error::invalid("oracle dump", "no ground truth annotations"));
        }
        return oracle_table(&dump_pools(&ds), cfg, &format!("oracle study on {}", path.display()));
    }
    let tc = oracle_baseline_config(cfg);
    let train_set = prepare_scenes(&tc, Stream::TrainScenes, tc.train_scenes)?;
    let eval_set = prepare_scenes(&tc, Stream::EvalScenes, tc.eval_scenes)?;
    let outcome = train_on(&tc, &train_set, &eval_set)?;
    let scenes = prepare_scenes(&tc, Stream::EvalScenes, cfg.experiment.oracle_scenes)?;
    let pools = head_pools(&outcome, &tc, &scenes)?;
    oracle_table(&pools, cfg, &format!("oracle study, fl+ctr baseline, seed {}", tc.seed))
}

/// Trains `tc` once per seed; failed (diverged) runs are counted, not fatal.
fn seed_runs(tc: &TrainConfig, seeds: &[u64]) -> Result<Vec<Option<EvalSummary>>> {
    seeds
        .iter()
        .map(|&seed| {
            let run = TrainConfig { seed, ..tc.clone() };
            match train(&run) {
                Ok(o) => Ok(Some(o.final_eval)),
                Err(Error::Divergence(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Appends one mean row and one row per seed.
fn push_seed_rows(t: &mut ReportTable, label: &str, seeds: &[u64], runs: &[Option<EvalSummary>]) {
    let ok: Vec<&EvalSummary> = runs.iter().flatten().collect();
    let mean = |f: fn(&EvalSummary) -> f64| {
        if ok.is_empty() {
            0.0
        } else {
            ok.iter().map(|s| f(s)).sum::<f64>() / ok.len() as f64
        }
    };
    t.push(
        label,
        vec![
            mean(|s| s.ap),
            mean(|s| s.ap50),
            mean(|s| s.ap75),
            ok.len() as f64,
            (runs.len() - ok.len()) as f64,
        ],
    );
    for (seed, r) in seeds.iter().zip(runs) {
        let (v, failed) = match r {
            Some(s) => (summary_row(s), 0.0),
            None => (vec![0.0; 3], 1.0),
        };
        t.push(
            format!("{label}@{seed}"),
            vec![v[0], v[1], v[2], 1.0 - failed, failed],
        );
    }
}

/// One head per (variant, seed); rows carry the mean over seeds followed by
/// the individual runs.
pub fn run_loss_compare(cfg: &Config) -> Result<ReportTable> {
    let base = cfg.train_config();
    let seeds = &cfg.experiment.seeds;
    let mut t = ReportTable::new("loss comparison", &SEED_COLUMNS, cfg);
    for &variant in &cfg.experiment.variants {
        let mut tc = base.clone();
        tc.loss.variant = variant;
        push_seed_rows(&mut t, &variant.name().to_lowercase(), seeds, &seed_runs(&tc, seeds)?);
    }
    Ok(t)
}

pub fn run_q_weight_ablation(cfg: &Config) -> Result<ReportTable> {
    let base = cfg.train_config();
    let seeds = &cfg.experiment.seeds;
    let mut t = ReportTable::new("q weighting ablation (vfl)", &SEED_COLUMNS, cfg);
    for (label, on) in [("q_weighting_on", true), ("q_weighting_off", false)] {
        let mut tc = base.clone();
        tc.loss.variant = LossVariant::Vfl;
        tc.loss.q_weighting = on;
        push_seed_rows(&mut t, label, seeds, &seed_runs(&tc, seeds)?);
    }
    Ok(t)
}

pub fn run_hyperparam_sweep(cfg: &Config) -> Result<ReportTable> {
    let base = cfg.train_config();
    let seeds = &cfg.experiment.seeds;
    let mut t = ReportTable::new("varifocal (gamma, alpha) sweep", &SEED_COLUMNS, cfg);
    for &[gamma, alpha] in &cfg.experiment.sweep {
        let mut tc = base.clone();
        tc.loss.variant = LossVariant::Vfl;
        tc.loss.gamma = gamma;
        tc.loss.alpha = alpha;
        tc.validate()?;
        push_seed_rows(&mut t, &format!("gamma={gamma},alpha={alpha}"), seeds, &seed_runs(&tc, seeds)?);
    }
    Ok(t)
}

pub fn run_refine_ablation(cfg: &Config) -> Result<ReportTable> {
    let base = cfg.train_config();
    let seeds = &cfg.experiment.seeds;
    let mut t = ReportTable::new("refinement ablation", &SEED_COLUMNS, cfg);
    for (label, on) in [("refine", true), ("frozen_scales", false)] {
        let tc = TrainConfig {
            refine: on,
            ..base.clone()
        };
        push_seed_rows(&mut t, label, seeds, &seed_runs(&tc, seeds)?);
    }
    Ok(t)
}

/// Dispatches on `experiment.kind`.
pub fn run_experiment(cfg: &Config) -> Result<ReportTable> {
    cfg.validate()?;
    match cfg.experiment.kind {
        ExperimentKind::Train => Ok(run_train(cfg)?.table),
        ExperimentKind::Eval => run_eval(cfg),
        ExperimentKind::Oracle => run_oracle_study(cfg),
        ExperimentKind::LossCompare => run_loss_compare(cfg),
        ExperimentKind::QWeightAblation => run_q_weight_ablation(cfg),
        ExperimentKind::HyperparamSweep => run_hyperparam_sweep(cfg),
        ExperimentKind::RefineAblation => run_refine_ablation(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::coco_ap;

    fn tiny() -> Config {
        let mut c = Config::default();
        c.train.epochs = 1;
        c.train.train_scenes = 8;
        c.train.eval_scenes = 6;
        c.experiment.seeds = vec![0, 1];
        c.experiment.oracle_scenes = 6;
        c
    }

    #[test]
    fn train_dump_reproduces_ap() {
        let run = run_train(&tiny()).unwrap();
        let back = Dataset::from_json_str(&run.dump.to_json_string().unwrap(), false).unwrap();
        let s = coco_ap(&back.detection_records(), &back.eval_images(), 3).unwrap();
        assert_eq!(s.ap, run.outcome.final_eval.ap);
        assert_eq!(run.table.value("final", "ap"), Some(s.ap));
    }

    #[test]
    fn oracle_none_equals_plain_evaluation() {
        let cfg = tiny();
        let tc = oracle_baseline_config(&cfg);
        let outcome = train(&tc).unwrap();
        let scenes = prepare_scenes(&tc, Stream::EvalScenes, tc.eval_scenes).unwrap();
        let pools = head_pools(&outcome, &tc, &scenes).unwrap();
        let s = oracle_ap(&pools, OracleMode::None, true, &tc.inference, 3).unwrap();
        assert_eq!(s, outcome.final_eval);
        // Perfect boxes at fixed scores never hurt.
        let b = oracle_ap(&pools, OracleMode::GtBbox, true, &tc.inference, 3).unwrap();
        assert!(b.ap >= s.ap);
    }

    #[test]
    fn oracle_table_has_ten_rows() {
        let t = run_oracle_study(&tiny()).unwrap();
        assert_eq!(t.rows.len(), 10);
        assert!(t.row("gt_cls_iou").is_some() && t.row("none+ctr").is_some());
    }

    #[test]
    fn single_variant_compare() {
        let mut cfg = tiny();
        cfg.experiment.variants = vec![LossVariant::Fl];
        cfg.experiment.seeds = vec![3];
        let t = run_loss_compare(&cfg).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.value("fl", "runs"), Some(1.0));
        assert_eq!(t.value("fl", "ap"), t.value("fl@3", "ap"));
    }

    #[test]
    fn diverged_runs_are_counted() {
        let mut cfg = tiny();
        cfg.train.learning_rate = 1e300;
        cfg.experiment.variants = vec![LossVariant::Vfl];
        let t = run_loss_compare(&cfg).unwrap();
        assert_eq!(t.value("vfl", "failed"), Some(2.0));
        assert_eq!(t.value("vfl", "runs"), Some(0.0));
    }

    #[test]
    fn dump_candidates_round_trip_through_oracle() {
        let cfg = tiny();
        let tc = oracle_baseline_config(&cfg);
        let outcome = train(&tc).unwrap();
        let scenes = prepare_scenes(&tc, Stream::EvalScenes, 4).unwrap();
        let pools = head_pools(&outcome, &tc, &scenes).unwrap();
        let mut ds = detections_dump(&scenes, &[]);
        for p in &pools {
            for (lc, la) in p.levels.iter().zip(&p.assoc) {
                for (c, a) in lc.iter().zip(la) {
                    ds.detections.push(DetectionEntry {
                        image_id: p.image.image_id,
                        bbox: c.bbox.to_array(),
                        score_vector: Some(c.scores.clone()),
                        ctr: c.ctr,
                        level: Some(c.level),
                        location: Some([c.location.x, c.location.y]),
                        source_index: Some(c.source_index),
                        assigned_gt: *a,
                        ..Default::default()
                    });
                }
            }
        }
        let back = Dataset::from_json_str(&ds.to_json_string().unwrap(), false).unwrap();
        assert_eq!(dump_pools(&back), pools);
    }

    #[test]
    fn suppress_dump_is_per_class() {
        let det = |bbox: [f64; 4], class_id, score| DetectionEntry {
            image_id: 0,
            bbox,
            class_id: Some(class_id),
            score: Some(score),
            ..Default::default()
        };
        let ds = Dataset {
            images: vec![ImageEntry {
                id: 0,
                width: 32.0,
                height: 32.0,
            }],
            annotations: vec![],
            detections: vec![
                det([0.0, 0.0, 10.0, 10.0], 0, 0.9),
                det([1.0, 0.0, 11.0, 10.0], 0, 0.8),
                det([1.0, 0.0, 11.0, 10.0], 1, 0.7),
            ],
        };
        let out = suppress_dump(&ds, &InferenceConfig::default(), None).unwrap();
        let scores: Vec<_> = out.detections.iter().map(|d| (d.class_id, d.score)).collect();
        assert_eq!(scores, vec![(Some(0), Some(0.9)), (Some(1), Some(0.7))]);
        let soft = SoftNmsConfig::default();
        let out = suppress_dump(&ds, &InferenceConfig::default(), Some(&soft)).unwrap();
        assert_eq!(out.detections.len(), 3);
        assert!(out.detections[1].score.unwrap() < 0.8);
    }
}
