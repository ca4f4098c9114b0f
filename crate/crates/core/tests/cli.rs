use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lulc::labels::LulcClass;
use lulc::training::{load_checkpoint, TrainMode};

fn lulc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lulc"))
        .args(args)
        .current_dir(dir)
        .env_remove("LULC_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scenes(dir: &Path) {
    let o = lulc(dir, &["--out", "data", "synth", "--count", "8", "--width", "300", "--height", "250"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&lulc(tmp.path(), &[])), 2);
    assert_eq!(code(&lulc(tmp.path(), &["frobnicate"])), 2);
    assert_eq!(code(&lulc(tmp.path(), &["split"])), 2);
}

#[test]
fn config_problems_are_reported_together() {
    let tmp = tempfile::tempdir().unwrap();
    scenes(tmp.path());
    let o = lulc(
        tmp.path(),
        &["--config", "data/config.json", "pipeline", "--class", "water", "--epochs", "0", "--lr", "-1"],
    );
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("error kind=config code=2: "), "{line}");
    assert!(line.contains("epochs") && line.contains("learning_rate"), "{line}");
    assert!(!tmp.path().join("data/out").exists());
}

#[test]
fn bad_seed_env_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lulc"))
        .args(["--dry-run", "synth"])
        .current_dir(tmp.path())
        .env("LULC_SEED", "minus one")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("LULC_SEED"));
}

#[test]
fn missing_image_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    scenes(tmp.path());
    fs::remove_file(tmp.path().join("data/images/img002.png")).unwrap();
    let o = lulc(tmp.path(), &["--config", "data/config.json", "split", "--class", "water"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("img002"));
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    scenes(tmp.path());
    let o = lulc(tmp.path(), &["--config", "data/config.json", "--dry-run", "pipeline", "--class", "water"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("dry run ok"));
    assert!(!tmp.path().join("data/out").exists());
}

#[test]
fn split_reproduces_presence_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lulc(tmp.path(), &["--out", "p", "synth", "--kind", "presence"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let expected = [
        ("forest", "selected 31, train 25, test 6"),
        ("farmland", "selected 131, train 119, test 12"),
        ("builtup", "selected 60, train 52, test 8"),
        ("water", "selected 72, train 63, test 9"),
    ];
    for (class, line) in expected {
        let o = lulc(tmp.path(), &["--config", "p/config.json", "split", "--class", class]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(stdout(&o).trim(), line);
        assert!(tmp.path().join(format!("p/out/split.{class}.json")).is_file());
    }
}

#[test]
fn divergence_exits_4_with_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    scenes(tmp.path());
    let o = lulc(
        tmp.path(),
        &["--config", "data/config.json", "pipeline", "--class", "water", "--lr", "1e30", "--epochs", "3"],
    );
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("error kind=divergence code=4"));
    let dir = tmp.path().join("data/out/water-downsample");
    let cp = load_checkpoint(dir.join("checkpoint.last-good.fcn8")).unwrap();
    assert!(cp.model.is_finite());
    assert!(!dir.join("checkpoint.fcn8").exists());
}

#[test]
fn grid_pipeline_writes_every_output() {
    let tmp = tempfile::tempdir().unwrap();
    scenes(tmp.path());
    let o = lulc(
        tmp.path(),
        &["--config", "data/config.json", "pipeline", "--class", "water", "--mode", "grid", "--epochs", "1"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dir = tmp.path().join("data/out/water-grid");
    for f in
        ["split.json", "losses.json", "checkpoint.fcn8", "metrics.json", "report.txt", "report.json", "run-record.json"]
    {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    for sub in ["predictions", "truth", "errormaps"] {
        assert!(fs::read_dir(dir.join(sub)).unwrap().count() > 0, "empty {sub}");
    }
    let cp = load_checkpoint(dir.join("checkpoint.fcn8")).unwrap();
    assert_eq!(cp.manifest.class, Some(LulcClass::Water));
    assert_eq!(cp.manifest.mode, Some(TrainMode::Grid));
    assert_eq!(cp.manifest.epochs, 1);
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics.get("row").is_some(), "{metrics}");
    assert!(fs::read_to_string(dir.join("report.txt")).unwrap().contains("FCN-8 grid"));

    // the trained checkpoint drives the standalone predict stage
    let ckpt = dir.join("checkpoint.fcn8");
    let image = tmp.path().join("data/images/img000.png");
    let o = lulc(
        tmp.path(),
        &[
            "--out",
            "pred",
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--mode",
            "grid",
            "--image",
            image.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(tmp.path().join("pred/img000.pred.png").is_file());
}
