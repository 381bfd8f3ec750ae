//! SGD training of [`MicroHead`] on synthetic scenes, held-out evaluation and
//! the full-model gradient check.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assigner::{atss_assign, build_targets, Assignment, GridSpec, GtObject, DEFAULT_ATSS_TOPK};
use crate::error::{Error, Result};
use crate::eval::{coco_ap, DetectionRecord, EvalImage, EvalSummary};
use crate::geometry::{centerness, encode_distances, iou};
use crate::losses::{total_loss, LocationPrediction, LocationTarget, LossConfig, LossVariant, PROB_EPS};
use crate::ranking::{inference_filter, Candidate, InferenceConfig, RankMode};
use crate::trainer::features::{render_features, structured_channels, FeatureGrid, DEFAULT_FEATURE_DIM};
use crate::trainer::head::{ForwardCache, HeadConfig, HeadOutput, MicroHead, OutputGrad};
use crate::trainer::scene::{generate_scene, SceneRecord, SceneSpec};

/// Which predicted box the classification target IoU is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetBox {
    Initial,
    #[default]
    Refined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub target_box: TargetBox,
    pub scene: SceneSpec,
    pub strides: Vec<u32>,
    pub atss_topk: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub refine: bool,
    pub ctr_branch: bool,
    pub loss: LossConfig,
    pub inference: InferenceConfig,
    /// Ranking mode at evaluation; `None` picks cls x ctr for heads with a
    /// centerness branch and the raw score otherwise.
    pub rank_mode: Option<RankMode>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            learning_rate: 0.01,
            batch_size: 1,
            train_scenes: 300,
            eval_scenes: 100,
            grad_clip: 0.0,
            target_box: TargetBox::Refined,
            scene: SceneSpec::default(),
            strides: vec![4, 8],
            atss_topk: DEFAULT_ATSS_TOPK,
            feature_dim: DEFAULT_FEATURE_DIM,
            hidden: 8,
            refine: true,
            ctr_branch: false,
            loss: LossConfig::default(),
            inference: InferenceConfig::default(),
            rank_mode: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.loss.validate()?;
        self.head_config().validate()?;
        self.grid()?;
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs > 0 && self.train_scenes == 0 {
            return bad("train_scenes must be positive when training".into());
        }
        if self.atss_topk == 0 {
            return bad("atss_topk must be at least 1".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative".into());
        }
        self.inference.validate()?;
        if self.feature_dim < structured_channels(self.scene.num_classes) {
            return bad(format!(
                "feature_dim {} is below the {} structured channels",
                self.feature_dim,
                structured_channels(self.scene.num_classes)
            ));
        }
        Ok(())
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            feature_dim: self.feature_dim,
            hidden: self.hidden,
            num_classes: self.scene.num_classes,
            refine: self.refine,
            ctr_branch: self.ctr_branch,
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::for_image(self.scene.width, self.scene.height, &self.strides)
    }

    pub fn effective_rank_mode(&self) -> RankMode {
        self.rank_mode.unwrap_or(if self.ctr_branch {
            RankMode::ClsTimesCtr
        } else {
            RankMode::Iacs
        })
    }
}

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    TrainScenes = 1,
    EvalScenes = 2,
    Init = 3,
    Shuffle = 4,
    GradCheck = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// A scene with its rendered features and fixed label assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedScene {
    pub scene: SceneRecord,
    pub gts: Vec<GtObject>,
    pub features: FeatureGrid,
    pub assignment: Assignment,
}

pub fn prepare_scene(
    scene: SceneRecord,
    grid: &GridSpec,
    num_classes: usize,
    feature_dim: usize,
    atss_topk: usize,
) -> Result<PreparedScene> {
    let gts = scene.gts();
    let features = render_features(&scene, grid, num_classes, feature_dim)?;
    let assignment = atss_assign(grid, &gts, atss_topk)?;
    Ok(PreparedScene {
        scene,
        gts,
        features,
        assignment,
    })
}

/// `count` scenes from one stream of the run seed.
pub fn prepare_scenes(cfg: &TrainConfig, stream: Stream, count: usize) -> Result<Vec<PreparedScene>> {
    let grid = cfg.grid()?;
    let mut rng = stream_rng(cfg.seed, stream);
    (0..count)
        .map(|_| {
            let s = generate_scene(&mut rng, &cfg.scene);
            prepare_scene(s, &grid, cfg.scene.num_classes, cfg.feature_dim, cfg.atss_topk)
        })
        .collect()
}

/// Supervision of one scene, frozen at construction time.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTargets {
    pub locations: Vec<LocationTarget>,
    /// True centerness of foreground locations.
    pub ctr: Vec<Option<f64>>,
}

/// Classification targets are IoUs of the `target_box` prediction; the box
/// loss weight is the IoU of the initial box.
pub fn build_scene_targets(
    outputs: &[HeadOutput],
    prepared: &PreparedScene,
    num_classes: usize,
    target_box: TargetBox,
) -> Result<SceneTargets> {
    let boxes: Vec<_> = outputs
        .iter()
        .map(|o| match target_box {
            TargetBox::Initial => o.initial_box(),
            TargetBox::Refined => o.refined_box(),
        })
        .collect();
    let mut locations = build_targets(&prepared.assignment, &boxes, &prepared.gts, num_classes)?;
    let mut ctr = vec![None; outputs.len()];
    for (i, (t, o)) in locations.iter_mut().zip(outputs).enumerate() {
        if let Some(gt) = t.gt_box {
            t.q_weight = iou(&o.initial_box(), &gt);
            ctr[i] = Some(
                encode_distances(o.location.point, &gt)
                    .map(|d| centerness(&d))
                    .unwrap_or(0.0),
            );
        }
    }
    Ok(SceneTargets { locations, ctr })
}

/// Loss value of a batch and its gradient with respect to the head parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub num_pos: usize,
    pub grad: Vec<f64>,
}

fn binary_ce(p: f64, t: f64) -> (f64, f64) {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (
        -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()),
        (p - t) / (p * (1.0 - p)),
    )
}

/// Detection loss over a batch with the given targets, plus a centerness
/// cross-entropy on foreground locations when the head has that branch.
pub fn batch_loss(
    head: &MicroHead,
    grid: &GridSpec,
    scenes: &[&PreparedScene],
    targets: &[SceneTargets],
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let fwd: Vec<Vec<(HeadOutput, ForwardCache)>> = scenes
        .iter()
        .map(|s| head.forward_cached(grid, &s.features))
        .collect::<Result<_>>()?;
    batch_loss_from(head, scenes, &fwd, targets, cfg)
}

fn batch_loss_from(
    head: &MicroHead,
    scenes: &[&PreparedScene],
    fwd: &[Vec<(HeadOutput, ForwardCache)>],
    targets: &[SceneTargets],
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    if targets.len() != scenes.len() {
        return Err(Error::ShapeMismatch("one target set per scene required".into()));
    }
    let mut preds = Vec::new();
    let mut tgts = Vec::new();
    for (f, t) in fwd.iter().zip(targets) {
        for (o, _) in f {
            preds.push(LocationPrediction {
                scores: o.scores.clone(),
                init_box: o.initial_box(),
                refined_box: o.refined_box(),
            });
        }
        tgts.extend(t.locations.iter().cloned());
    }
    let lb = total_loss(&preds, &tgts, cfg)?;
    let norm = lb.num_pos.max(1) as f64;
    let mut loss = lb.total;
    let mut grad = vec![0.0; head.num_params()];
    let mut k = 0;
    for ((f, t), s) in fwd.iter().zip(targets).zip(scenes) {
        for (j, (o, cache)) in f.iter().enumerate() {
            let g = &lb.grads[k];
            k += 1;
            let mut og = OutputGrad {
                d_scores: g.d_scores.clone(),
                d_initial_box: g.d_init_box,
                d_refined_box: g.d_refined_box,
                d_ctr: 0.0,
            };
            if let (Some(c), Some(tc)) = (o.ctr, t.ctr[j]) {
                let (l, dl) = binary_ce(c, tc);
                loss += l / norm;
                og.d_ctr = dl / norm;
            }
            head.backward(&s.features, o, cache, &og, &mut grad)?;
        }
    }
    Ok(BatchLoss {
        loss,
        num_pos: lb.num_pos,
        grad,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub head: MicroHead,
    pub history: Vec<EpochMetrics>,
    /// Held-out summary of the final head.
    pub final_eval: EvalSummary,
}

pub fn init_head(cfg: &TrainConfig) -> Result<MicroHead> {
    MicroHead::init(
        cfg.head_config(),
        &mut stream_rng(cfg.seed, Stream::Init),
        cfg.scene.typical_half_size(),
    )
}

/// Trains a fresh head and evaluates it on the held-out stream after every
/// epoch.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = prepare_scenes(cfg, Stream::TrainScenes, cfg.train_scenes)?;
    let eval_set = prepare_scenes(cfg, Stream::EvalScenes, cfg.eval_scenes)?;
    train_on(cfg, &train_set, &eval_set)
}

pub fn train_on(cfg: &TrainConfig, train_set: &[PreparedScene], eval_set: &[PreparedScene]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let mut head = init_head(cfg)?;
    let frozen = head.frozen_mask();
    let mut shuffle = stream_rng(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let scenes: Vec<&PreparedScene> = chunk.iter().map(|&i| &train_set[i]).collect();
            let fwd: Vec<_> = scenes
                .iter()
                .map(|s| head.forward_cached(&grid, &s.features))
                .collect::<Result<_>>()?;
            let targets: Vec<SceneTargets> = fwd
                .iter()
                .zip(&scenes)
                .map(|(f, s)| {
                    let outs: Vec<HeadOutput> = f.iter().map(|(o, _)| o.clone()).collect();
                    build_scene_targets(&outs, s, cfg.scene.num_classes, cfg.target_box)
                })
                .collect::<Result<_>>()?;
            let mut bl = batch_loss_from(&head, &scenes, &fwd, &targets, &cfg.loss)?;
            if !bl.loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}, batch {batches}"
                )));
            }
            if cfg.grad_clip > 0.0 {
                let n = bl.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if n > cfg.grad_clip {
                    bl.grad.iter_mut().for_each(|g| *g *= cfg.grad_clip / n);
                }
            }
            for ((w, g), fz) in head.params.iter_mut().zip(&bl.grad).zip(&frozen) {
                if !fz {
                    *w -= cfg.learning_rate * g;
                }
            }
            if head.params.iter().any(|w| !w.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite weights at epoch {epoch}, batch {batches}"
                )));
            }
            loss_sum += bl.loss;
            batches += 1;
        }
        let (summary, _) = evaluate(&head, &grid, eval_set, cfg)?;
        history.push(EpochMetrics {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            ap: summary.ap,
            ap50: summary.ap50,
            ap75: summary.ap75,
        });
    }
    let (final_eval, _) = evaluate(&head, &grid, eval_set, cfg)?;
    Ok(TrainOutcome {
        head,
        history,
        final_eval,
    })
}

/// Per-level candidates of one scene; `source_index` is the flat location index.
pub fn predict_candidates(head: &MicroHead, grid: &GridSpec, features: &FeatureGrid) -> Result<Vec<Vec<Candidate>>> {
    let mut levels = vec![Vec::new(); grid.levels.len()];
    for (i, o) in head.forward(grid, features)?.into_iter().enumerate() {
        levels[o.location.level].push(Candidate {
            bbox: o.refined_box(),
            scores: o.scores.clone(),
            level: o.location.level,
            ctr: o.ctr,
            location: o.location.point,
            source_index: i,
        });
    }
    Ok(levels)
}

/// Image ids of the held-out set are scene indices.
pub fn eval_images(scenes: &[PreparedScene]) -> Vec<EvalImage> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| EvalImage {
            image_id: i as u64,
            gts: s.gts.clone(),
        })
        .collect()
}

/// Runs inference on every scene and scores the detections.
pub fn evaluate(
    head: &MicroHead,
    grid: &GridSpec,
    scenes: &[PreparedScene],
    cfg: &TrainConfig,
) -> Result<(EvalSummary, Vec<DetectionRecord>)> {
    let inf = InferenceConfig {
        mode: cfg.effective_rank_mode(),
        ..cfg.inference
    };
    let mut dets = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let cands = predict_candidates(head, grid, &s.features)?;
        for d in inference_filter(&cands, &inf)? {
            dets.push(DetectionRecord {
                image_id: i as u64,
                bbox: d.bbox,
                class_id: d.class_id,
                score: d.score,
            });
        }
    }
    let summary = coco_ap(&dets, &eval_images(scenes), cfg.scene.num_classes)?;
    Ok((summary, dets))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    /// One-sided slopes differing by more than this mark a kink.
    pub kink_tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 1000,
            step: 1e-6,
            tolerance: 1e-3,
            abs_floor: 1e-6,
            kink_tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub samples: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    /// Draws rejected because the perturbation straddled a non-differentiable point.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.failures == 0 && self.max_rel_err < tolerance
    }
}

/// The miniature instance used by the gradient check: a single 4x4 level,
/// two classes, a 12-wide feature and a 4-wide hidden layer.
pub fn grad_check_instance(variant: LossVariant, ctr_branch: bool) -> TrainConfig {
    TrainConfig {
        scene: SceneSpec {
            width: 32.0,
            height: 32.0,
            num_classes: 2,
            min_objects: 1,
            max_objects: 2,
            min_size: 8.0,
            max_size: 24.0,
            ..SceneSpec::default()
        },
        strides: vec![8],
        feature_dim: 12,
        hidden: 4,
        ctr_branch,
        loss: LossConfig {
            variant,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Central-difference check of the full head loss against backprop on random
/// (instance, parameter) draws. Targets are frozen at the unperturbed weights.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = stream_rng(cfg.seed, Stream::GradCheck);
    let variants = [LossVariant::Vfl, LossVariant::Fl, LossVariant::Qfl];
    let mut setups = Vec::new();
    for (i, &v) in variants.iter().enumerate() {
        for ctr in [false, true] {
            let mut tc = grad_check_instance(v, ctr);
            tc.seed = cfg.seed.wrapping_add(i as u64 * 2 + u64::from(ctr));
            tc.loss.q_weighting = rng.random_bool(0.5);
            let grid = tc.grid()?;
            let scenes = prepare_scenes(&tc, Stream::TrainScenes, 2)?;
            let mut head = init_head(&tc)?;
            // Larger weights than at init so every branch carries signal.
            for w in head.params.iter_mut() {
                *w += rng.random_range(-0.3..0.3);
            }
            let refs: Vec<&PreparedScene> = scenes.iter().collect();
            let targets: Vec<SceneTargets> = scenes
                .iter()
                .map(|s| {
                    let outs = head.forward(&grid, &s.features)?;
                    build_scene_targets(&outs, s, tc.scene.num_classes, tc.target_box)
                })
                .collect::<Result<_>>()?;
            let base = batch_loss(&head, &grid, &refs, &targets, &tc.loss)?;
            setups.push((tc, grid, scenes, head, targets, base));
        }
    }

    let mut report = GradCheckReport {
        samples: 0,
        failures: 0,
        max_rel_err: 0.0,
        skipped_kinks: 0,
    };
    let h = cfg.step;
    let attempts = cfg.samples * 10 + 100;
    for _ in 0..attempts {
        if report.samples == cfg.samples {
            break;
        }
        let (tc, grid, scenes, head, targets, base) = &setups[rng.random_range(0..setups.len())];
        let i = rng.random_range(0..head.num_params());
        if head.frozen_mask()[i] {
            continue;
        }
        let refs: Vec<&PreparedScene> = scenes.iter().collect();
        let eval_at = |delta: f64| -> Result<f64> {
            let mut hp = head.clone();
            hp.params[i] += delta;
            Ok(batch_loss(&hp, grid, &refs, targets, &tc.loss)?.loss)
        };
        let (fp, fm) = (eval_at(h)?, eval_at(-h)?);
        let fwd_slope = (fp - base.loss) / h;
        let bwd_slope = (base.loss - fm) / h;
        let slope_scale = fwd_slope.abs().max(bwd_slope.abs()).max(cfg.abs_floor);
        // Central differences agree with one-sided ones to O(h) on smooth
        // stretches; a jump between them means a relu, clamp or cell edge.
        if (fwd_slope - bwd_slope).abs() / slope_scale > cfg.kink_tolerance.max(1e3 * h) {
            report.skipped_kinks += 1;
            continue;
        }
        let num = (fp - fm) / (2.0 * h);
        let ana = base.grad[i];
        let err = (num - ana).abs() / num.abs().max(ana.abs()).max(cfg.abs_floor);
        report.max_rel_err = report.max_rel_err.max(err);
        if err >= cfg.tolerance {
            report.failures += 1;
        }
        report.samples += 1;
    }
    if report.samples < cfg.samples {
        return Err(Error::Divergence(format!(
            "gradient check drew only {} usable samples",
            report.samples
        )));
    }
    Ok(report)
}
