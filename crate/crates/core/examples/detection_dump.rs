//! Writes the held-out detections of a short training run as a JSON dump,
//! reads it back, re-evaluates it and runs class-wise NMS over it.

use densedet::eval::EvalOptions;
use densedet::harness::dataset::Dataset;
use densedet::harness::experiments::{evaluate_dump, run_train, suppress_dump};
use densedet::harness::Config;

fn main() -> densedet::Result<()> {
    let mut cfg = Config::default();
    cfg.train.epochs = 5;
    cfg.train.train_scenes = 120;
    cfg.train.eval_scenes = 40;
    let run = run_train(&cfg)?;

    let path = std::env::temp_dir().join("densedet-dump.json");
    run.dump.write(&path)?;
    let back = Dataset::load(&path, false)?;
    println!(
        "{}: {} images, {} annotations, {} detections",
        path.display(),
        back.images.len(),
        back.annotations.len(),
        back.detections.len()
    );

    let tc = cfg.train_config();
    let s = evaluate_dump(&back, tc.scene.num_classes, &tc.inference, &EvalOptions::default())?;
    println!("stored AP {:.6}, re-evaluated AP {:.6}", run.outcome.final_eval.ap, s.ap);

    let mut strict = tc.inference;
    strict.nms_thr = 0.3;
    let kept = suppress_dump(&back, &strict, None)?;
    let s = evaluate_dump(&kept, tc.scene.num_classes, &strict, &EvalOptions::default())?;
    println!("after NMS @0.3: {} detections, AP {:.6}", kept.detections.len(), s.ap);
    Ok(())
}
