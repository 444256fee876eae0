use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spatialgan_core::SegmentationMap;
use spatialgan_service::wire::IndexMap;

const TINY: &str = "image_size = 16\nbase_channels = 4\nn_z = 8\nm = 4\nn_repeat = 1\nepochs = 1\nshapes_count = 12\nsnapshot_count = 2\nout_dir = \"run\"\n";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spatialgan")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train", "--bogus"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(code(&run(dir.path(), &[])), 2);
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
}

#[test]
fn invalid_config_fails_before_any_work() {
    let dir = tiny_dir();
    let o = run(dir.path(), &["train", "--config", "tiny.toml", "--override", "m=0"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("Usage"));
    assert!(!dir.path().join("run").exists());

    fs::write(dir.path().join("bad.toml"), "epochs = \n").unwrap();
    assert_eq!(code(&run(dir.path(), &["train", "--config", "bad.toml"])), 3);
    fs::write(dir.path().join("unknown.toml"), "epoch = 3\n").unwrap();
    assert_eq!(code(&run(dir.path(), &["pretrain-seg", "--config", "unknown.toml"])), 3);
    assert_eq!(code(&run(dir.path(), &["train", "--config", "missing.toml"])), 4);
}

#[test]
fn synth_data_writes_a_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["synth-data", "--override", "count=10", "--override", "image_size=16", "--out", "shapes"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = fs::read_to_string(dir.path().join("shapes/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).count(), 10);
    let o = run(dir.path(), &["synth-data", "--override", "palette=[]", "--out", "x"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn train_generate_interpolate_and_resume() {
    let dir = tiny_dir();
    let p = dir.path();
    let o = run(p, &["train", "--config", "tiny.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["model.ckpt", "checkpoint.ckpt", "history.csv", "history.jsonl", "config.toml", "snapshots/epoch_000.png"] {
        assert!(p.join("run").join(f).exists(), "missing {f}");
    }
    let csv = fs::read_to_string(p.join("run/history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);

    // more epochs from the saved state
    let o = run(p, &["train", "--config", "tiny.toml", "--override", "epochs=2", "--resume", "run/model.ckpt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(p.join("run/history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    let o = run(p, &["train", "--config", "tiny.toml", "--override", "lr=0.5", "--resume", "run/model.ckpt"]);
    assert_eq!(code(&o), 3);
    let o = run(p, &["synth-data", "--override", "count=4", "--override", "image_size=16", "--out", "data"]);
    assert_eq!(code(&o), 0);

    let seg = fs::read_dir(p.join("data/segmentations")).unwrap().next().unwrap().unwrap().path();
    let seg = seg.strip_prefix(p).unwrap().to_str().unwrap().to_string();
    let gen = |out: &str, seed: &str| {
        run(p, &["generate", "--model", "run/model.ckpt", "--seg", &seg, "--attrs", "100", "--seed", seed, "--out", out])
    };
    assert_eq!(code(&gen("a.png", "7")), 0);
    assert_eq!(code(&gen("b.png", "7")), 0);
    assert_eq!(fs::read(p.join("a.png")).unwrap(), fs::read(p.join("b.png")).unwrap());
    let o = run(p, &["generate", "--model", "run/model.ckpt", "--seg", &seg, "--attrs", "1,0", "--out", "c.png"]);
    assert_eq!(code(&o), 4);

    let fixed = IndexMap::encode(&SegmentationMap::filled(16, 16, 4, 0).unwrap());
    let spec = serde_json::json!({
        "latent": {"lerp": {"from": {"seed": 1}, "to": {"seed": 2}}},
        "labels": {"fixed": [0, 0, 1]},
        "spatial": {"fixed": fixed},
        "steps": 5
    })
    .to_string();
    fs::write(p.join("spec.json"), &spec).unwrap();
    let o = run(p, &["interpolate", "--model", "run/model.ckpt", "--spec", "spec.json", "--out", "frames"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = fs::read_to_string(p.join("frames/manifest.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[4]["t"], 1.0);
    assert!(p.join("frames").join(lines[2]["path"].as_str().unwrap()).exists());
    fs::write(p.join("bad.json"), spec.replace("\"steps\":5", "\"steps\":1")).unwrap();
    let o = run(p, &["interpolate", "--model", "run/model.ckpt", "--spec", "bad.json", "--out", "frames2"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("steps"), "{}", stderr(&o));
}

#[test]
fn eval_prints_three_rows() {
    let dir = tiny_dir();
    let p = dir.path();
    assert_eq!(code(&run(p, &["train", "--config", "tiny.toml"])), 0);
    assert_eq!(code(&run(p, &["pretrain-seg", "--config", "tiny.toml", "--out", "judge.ckpt"])), 0);
    assert_eq!(code(&run(p, &["synth-data", "--override", "count=6", "--override", "image_size=16", "--override", "seed=9", "--out", "held"])), 0);
    let o = run(p, &["eval", "--model", "run/model.ckpt", "--dataset", "held/manifest.txt", "--judge", "judge.ckpt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("shuffled (floor)"));
    assert!(rows[2].starts_with("model"));
    assert!(rows[3].starts_with("original (ceiling)"));
    let o = run(p, &["eval", "--model", "judge.ckpt", "--dataset", "held/manifest.txt"]);
    assert_eq!(code(&o), 4);
}
