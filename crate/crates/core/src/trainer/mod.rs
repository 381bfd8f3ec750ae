//! Synthetic scenes, rendered features, the micro head and its training loop.

pub mod features;
pub mod head;
pub mod scene;
pub mod train;

pub use features::{bilinear_sample, render_features, star_aggregate, FeatureGrid, LevelFeatures};
pub use head::{HeadConfig, HeadOutput, MicroHead};
pub use scene::{generate_scene, SceneObject, SceneRecord, SceneSpec};
pub use train::{
    evaluate, gradient_check, predict_candidates, train, EpochMetrics, GradCheckConfig, GradCheckReport,
    TargetBox, TrainConfig, TrainOutcome,
};
