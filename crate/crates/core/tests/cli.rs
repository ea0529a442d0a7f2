use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scenecomp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "scenes", "images"] {
        let mut entries: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for e in entries.into_iter().filter(|e| e.is_file()) {
            out.push((e.strip_prefix(dir).unwrap().to_path_buf(), read(&e)));
        }
    }
    out
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    ckpt: PathBuf,
    graph: PathBuf,
}

/// Dataset of 4 scenes, a 2-step checkpoint and the first scene's graph.
fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    ok(&["gen-data", "--out", p(&data), "--num", "4", "--seed", "3"]);
    let cfg = root.join("train.json");
    std::fs::write(&cfg, r#"{"steps": 2, "batch_size": 2, "seed": 1, "eval_every": 0}"#).unwrap();
    let ckpt = root.join("m.ckpt");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt)]);
    Fixture {
        graph: data.join("scenes").join("0000.json"),
        _tmp: tmp,
        root,
        ckpt,
    }
}

#[test]
fn gen_data_and_train_are_deterministic() {
    let f = fixture();
    let again = f.root.join("data2");
    ok(&["gen-data", "--out", p(&again), "--num", "4", "--seed", "3"]);
    assert_eq!(dir_bytes(&f.root.join("data")), dir_bytes(&again));

    let ckpt2 = f.root.join("m2.ckpt");
    ok(&["train", "--config", p(&f.root.join("train.json")), "--data", p(&again), "--out", p(&ckpt2)]);
    assert_eq!(read(&f.ckpt), read(&ckpt2));
}

#[test]
fn sample_twice_and_identity_edit_are_identical() {
    let f = fixture();
    let img = |name: &str| f.root.join(name);
    let sample = |out: &Path| {
        ok(&["sample", "--ckpt", p(&f.ckpt), "--graph", p(&f.graph), "--seed", "7", "--steps", "4", "--nl", "2", "--out", p(out)]);
    };
    sample(&img("a.ppm"));
    sample(&img("b.ppm"));
    assert_eq!(read(&img("a.ppm")), read(&img("b.ppm")));
    assert_eq!(read(&img("a.ppm.mls.json")), read(&img("b.ppm.mls.json")));
    assert!(read(&img("a.ppm")).starts_with(b"P6\n16 16\n255\n"));

    let graph: serde_json::Value = serde_json::from_slice(&read(&f.graph)).unwrap();
    let id = graph["nodes"][0]["id"].as_str().unwrap();
    let color = graph["nodes"][0]["attributes"][0].as_str().unwrap();
    let edit = format!("set-attr {id} {color}");
    ok(&[
        "edit", "--ckpt", p(&f.ckpt), "--graph", p(&f.graph), "--state", p(&img("a.ppm.mls.json")),
        "--edit", &edit, "--steps", "4", "--out", p(&img("e.ppm")),
    ]);
    assert_eq!(read(&img("e.ppm")), read(&img("a.ppm")));
    assert_eq!(read(&img("e.ppm.mls.json")), read(&img("a.ppm.mls.json")));

    ok(&["sample", "--ckpt", p(&f.ckpt), "--graph", p(&f.graph), "--steps", "3", "--mls", "off", "--out", p(&img("plain.ppm"))]);
    assert!(!img("plain.ppm.mls.json").exists());
}

#[test]
fn eval_writes_a_json_report() {
    let f = fixture();
    let report = f.root.join("report.json");
    ok(&["eval", "--ckpt", p(&f.ckpt), "--data", p(&f.root.join("data")), "--report", p(&report), "--steps", "2", "--limit", "2"]);
    let r: serde_json::Value = serde_json::from_slice(&read(&report)).unwrap();
    for key in ["layout_iou", "attr_acc", "count_acc"] {
        assert!(r[key].as_f64().unwrap() >= 0.0);
    }
    assert_eq!(r["loss_curve"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_masks_reports_success() {
    let out = ok(&["eval-masks", "--instances", "20"]);
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["passed"], true);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.ckpt");
    let graph = tmp.path().join("g.json");
    std::fs::write(&graph, r#"{"nodes": [{"id": "a", "category": "circle"}]}"#).unwrap();
    let out = tmp.path().join("x.ppm");

    let r = run(&["sample", "--ckpt", p(&missing), "--graph", p(&graph), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!r.stderr.is_empty());

    let bad_cfg = tmp.path().join("cfg.json");
    std::fs::write(&bad_cfg, r#"{"steps": 1, "learning_rate": 3}"#).unwrap();
    let r = run(&["train", "--config", p(&bad_cfg), "--data", p(tmp.path()), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(3));

    let r = run(&["sample", "--ckpt", p(&missing), "--graph", p(&graph), "--out", p(&out), "--steps", "0"]);
    assert_eq!(r.status.code(), Some(3));

    let r = run(&["gen-data", "--out", p(tmp.path()), "--num", "1", "--frobnicate"]);
    assert_ne!(r.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&r.stderr).contains("frobnicate"));
    assert!(!out.exists());
}

#[test]
fn invalid_graph_and_edit_are_validation_errors() {
    let f = fixture();
    let bad = f.root.join("bad.json");
    std::fs::write(&bad, r#"{"nodes": [{"id": "a", "category": "hexagon"}]}"#).unwrap();
    let out = f.root.join("x.ppm");
    let r = run(&["sample", "--ckpt", p(&f.ckpt), "--graph", p(&bad), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(3));

    let state = f.root.join("s.ppm.mls.json");
    ok(&["sample", "--ckpt", p(&f.ckpt), "--graph", p(&f.graph), "--steps", "2", "--nl", "1", "--out", p(&f.root.join("s.ppm"))]);
    let r = run(&[
        "edit", "--ckpt", p(&f.ckpt), "--graph", p(&f.graph), "--state", p(&state),
        "--edit", "set-attr nobody red", "--steps", "2", "--out", p(&out),
    ]);
    assert_eq!(r.status.code(), Some(3));
    assert!(!out.exists());
}
