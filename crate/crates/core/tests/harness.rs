use std::path::Path;
use std::process::Command;

use densedet::eval::EvalOptions;
use densedet::harness::dataset::Dataset;
use densedet::harness::experiments::{evaluate_dump, run_train};
use densedet::harness::report::{parse_csv_report, parse_json_report};
use densedet::harness::Config;
use densedet::Error;

fn tiny() -> Config {
    let mut c = Config::default();
    c.train.epochs = 3;
    c.train.train_scenes = 24;
    c.train.eval_scenes = 12;
    c
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_densedet"))
}

fn write_config(dir: &Path, name: &str, cfg: &Config) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, cfg.to_toml_string().unwrap()).unwrap();
    p
}

#[test]
fn dump_reproduces_stored_ap() {
    let cfg = tiny();
    let run = run_train(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dump.json");
    run.dump.write(&path).unwrap();
    let back = Dataset::load(&path, false).unwrap();
    assert_eq!(back, run.dump);
    let tc = cfg.train_config();
    let s = evaluate_dump(&back, tc.scene.num_classes, &tc.inference, &EvalOptions::default()).unwrap();
    assert_eq!(s.ap, run.outcome.final_eval.ap);
    assert_eq!(s.per_threshold, run.outcome.final_eval.per_threshold);
}

#[test]
fn malformed_records_name_index_and_field() {
    let doc = r#"{
        "images": [{"id": 1, "width": 32, "height": 32}],
        "annotations": [
            {"image_id": 1, "bbox": [0, 0, 10, 10], "class_id": 0},
            {"image_id": 1, "bbox": [8, 0, 4, 10], "class_id": 0}
        ]
    }"#;
    match Dataset::from_json_str(doc, false) {
        Err(Error::Schema { section, index, field, .. }) => {
            assert_eq!((section, index, field.as_str()), ("annotations", 1, "bbox"));
        }
        other => panic!("expected a schema error, got {other:?}"),
    }
    let doc = r#"{"images": [{"id": 1, "width": 32}], "annotations": []}"#;
    match Dataset::from_json_str(doc, false) {
        Err(Error::Schema { index, field, .. }) => assert_eq!((index, field.as_str()), (0, "height")),
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn xywh_flag_converts_boxes() {
    let doc = r#"{
        "images": [{"id": 0, "width": 32, "height": 32}],
        "annotations": [{"image_id": 0, "bbox": [2, 3, 10, 5], "class_id": 0}],
        "detections": [{"image_id": 0, "bbox": [2, 3, 10, 5], "class_id": 0, "score": 0.5}]
    }"#;
    let ds = Dataset::from_json_str(doc, true).unwrap();
    assert_eq!(ds.annotations[0].bbox, [2.0, 3.0, 12.0, 8.0]);
    assert_eq!(ds.detections[0].bbox, [2.0, 3.0, 12.0, 8.0]);
}

#[test]
fn cli_train_eval_and_nms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", &tiny());
    let dump = dir.path().join("dump.json");
    let report = dir.path().join("train.csv");
    let st = bin()
        .args(["train", "--seed", "3", "--config"])
        .arg(&cfg)
        .arg("--dump")
        .arg(&dump)
        .arg("--out")
        .arg(&report)
        .output()
        .unwrap()
        .status;
    assert_eq!(st.code(), Some(0));
    let table = parse_csv_report(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(table.meta.seed, 3);
    assert_eq!(table.meta.config_hash, table.meta.config.hash());
    let final_ap = table.value("final", "ap").unwrap();

    let eval_out = dir.path().join("eval.json");
    let st = bin()
        .arg("eval")
        .arg("--config")
        .arg(&cfg)
        .arg("--dump")
        .arg(&dump)
        .arg("--out")
        .arg(&eval_out)
        .output()
        .unwrap()
        .status;
    assert_eq!(st.code(), Some(0));
    let eval = parse_json_report(&std::fs::read_to_string(&eval_out).unwrap()).unwrap();
    assert!((eval.value("dump", "ap").unwrap() - final_ap).abs() <= 1e-12);

    let kept = dir.path().join("kept.json");
    let st = bin()
        .arg("nms")
        .arg("--dump")
        .arg(&dump)
        .args(["--iou", "0.3", "--out"])
        .arg(&kept)
        .output()
        .unwrap()
        .status;
    assert_eq!(st.code(), Some(0));
    let before = Dataset::load(&dump, false).unwrap();
    let after = Dataset::load(&kept, false).unwrap();
    assert!(after.detections.len() <= before.detections.len());
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = -1.0\n").unwrap();
    let st = bin().arg("train").arg("--config").arg(&bad).output().unwrap().status;
    assert_eq!(st.code(), Some(2));

    let broken = dir.path().join("broken.json");
    std::fs::write(
        &broken,
        r#"{"images": [{"id": 0, "width": 8, "height": 8}], "annotations": [{"image_id": 0, "bbox": [5, 5, 1, 1], "class_id": 0}]}"#,
    )
    .unwrap();
    let out = bin().arg("eval").arg("--dump").arg(&broken).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("annotations[0].bbox"));

    let mut diverge = tiny();
    diverge.train.epochs = 1;
    diverge.train.learning_rate = 1e300;
    let cfg = write_config(dir.path(), "diverge.toml", &diverge);
    let st = bin().arg("train").arg("--config").arg(&cfg).output().unwrap().status;
    assert_eq!(st.code(), Some(3));

    let st = bin().args(["grad-check", "--samples", "30"]).output().unwrap().status;
    assert_eq!(st.code(), Some(0));
}
