//! Experiment configuration: one TOML document with a flat section per module.
//! Every field has a default, so the empty document is a valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assigner::DEFAULT_ATSS_TOPK;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossVariant};
use crate::ranking::{InferenceConfig, RankMode};
use crate::trainer::features::DEFAULT_FEATURE_DIM;
use crate::trainer::scene::SceneSpec;
use crate::trainer::train::{TargetBox, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    Train,
    Eval,
    Oracle,
    LossCompare,
    QWeightAblation,
    HyperparamSweep,
    RefineAblation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub dim: usize,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self {
            dim: DEFAULT_FEATURE_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub strides: Vec<u32>,
    pub atss_topk: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            strides: TrainConfig::default().strides,
            atss_topk: DEFAULT_ATSS_TOPK,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub hidden: usize,
    pub refine: bool,
    pub ctr_branch: bool,
}

impl Default for HeadSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            hidden: t.hidden,
            refine: t.refine,
            ctr_branch: t.ctr_branch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub grad_clip: f64,
    pub target_box: TargetBox,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            train_scenes: t.train_scenes,
            eval_scenes: t.eval_scenes,
            grad_clip: t.grad_clip,
            target_box: t.target_box,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankingSection {
    pub score_floor: f64,
    pub topk_per_level: usize,
    pub nms_thr: f64,
    /// Absent means: cls x ctr for heads with a centerness branch, raw score otherwise.
    pub mode: Option<RankMode>,
}

impl Default for RankingSection {
    fn default() -> Self {
        let i = InferenceConfig::default();
        Self {
            score_floor: i.score_floor,
            topk_per_level: i.topk_per_level,
            nms_thr: i.nms_thr,
            mode: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub variants: Vec<LossVariant>,
    /// `(gamma, alpha)` pairs of the hyperparameter sweep.
    pub sweep: Vec<[f64; 2]>,
    /// Held-out scenes of the oracle study.
    pub oracle_scenes: usize,
    /// Detection dump consumed by `eval` and dump-based oracle runs.
    pub dump: Option<PathBuf>,
    /// Dump boxes are `[x, y, w, h]` rather than corners.
    pub xywh: bool,
    pub size_buckets: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Train,
            seeds: vec![0, 1, 2, 3, 4],
            variants: vec![LossVariant::Vfl, LossVariant::Fl, LossVariant::Qfl],
            sweep: vec![[1.0, 0.5], [1.5, 0.75], [2.0, 0.75], [2.5, 1.25], [3.0, 1.0]],
            oracle_scenes: 500,
            dump: None,
            xywh: false,
            size_buckets: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub experiment: ExperimentSection,
    pub scene: SceneSpec,
    pub features: FeatureSection,
    pub grid: GridSection,
    pub head: HeadSection,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub ranking: RankingSection,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        let e = &self.experiment;
        if matches!(
            e.kind,
            ExperimentKind::LossCompare | ExperimentKind::QWeightAblation | ExperimentKind::RefineAblation
        ) && e.seeds.is_empty()
        {
            return Err(Error::Config("experiment: seeds must not be empty".into()));
        }
        if e.kind == ExperimentKind::LossCompare && e.variants.is_empty() {
            return Err(Error::Config("experiment: variants must not be empty".into()));
        }
        if e.kind == ExperimentKind::Eval && e.dump.is_none() {
            return Err(Error::Config("experiment: eval needs a dump path".into()));
        }
        if e.kind == ExperimentKind::HyperparamSweep && e.sweep.is_empty() {
            return Err(Error::Config("experiment: sweep must not be empty".into()));
        }
        if e.kind == ExperimentKind::Oracle && e.dump.is_none() && e.oracle_scenes == 0 {
            return Err(Error::Config("experiment: oracle_scenes must be positive".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            seed: t.seed,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            train_scenes: t.train_scenes,
            eval_scenes: t.eval_scenes,
            grad_clip: t.grad_clip,
            target_box: t.target_box,
            scene: self.scene.clone(),
            strides: self.grid.strides.clone(),
            atss_topk: self.grid.atss_topk,
            feature_dim: self.features.dim,
            hidden: self.head.hidden,
            refine: self.head.refine,
            ctr_branch: self.head.ctr_branch,
            loss: self.loss.clone(),
            inference: InferenceConfig {
                score_floor: self.ranking.score_floor,
                topk_per_level: self.ranking.topk_per_level,
                nms_thr: self.ranking.nms_thr,
                mode: self.ranking.mode.unwrap_or_default(),
            },
            rank_mode: self.ranking.mode,
        }
    }

    /// SHA-256 over the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn defaults_match_trainer() {
        let t = Config::default().train_config();
        let d = TrainConfig::default();
        assert_eq!(t, d);
    }

    #[test]
    fn sections_parse() {
        let cfg = Config::from_toml_str(
            r#"
            [experiment]
            kind = "loss_compare"
            seeds = [3, 4]
            variants = ["fl", "vfl"]
            [loss]
            gamma = 1.5
            q_weighting = false
            [train]
            seed = 9
            epochs = 2
            [ranking]
            mode = "cls_times_ctr"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.experiment.kind, ExperimentKind::LossCompare);
        assert_eq!(cfg.experiment.variants, vec![LossVariant::Fl, LossVariant::Vfl]);
        let t = cfg.train_config();
        assert_eq!((t.seed, t.epochs, t.loss.gamma, t.loss.q_weighting), (9, 2, 1.5, false));
        assert_eq!(t.effective_rank_mode(), RankMode::ClsTimesCtr);
    }

    #[test]
    fn unknown_fields_and_bad_values_rejected() {
        assert!(Config::from_toml_str("[train]\nsead = 1\n").is_err());
        assert!(Config::from_toml_str("[bogus]\n").is_err());
        assert!(Config::from_toml_str("[train]\nlearning_rate = -1.0\n").is_err());
        assert!(Config::from_toml_str("[experiment]\nkind = \"eval\"\n").is_err());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let mut cfg = Config::default();
        cfg.train.seed = 17;
        cfg.ranking.mode = Some(RankMode::Cls);
        let back = Config::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.hash(), Config::default().hash());
        assert_eq!(cfg.hash().len(), 64);
    }
}
