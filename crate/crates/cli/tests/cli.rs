use std::path::Path;
use std::process::{Command, Output};

use dleng::io::container::read_index;
use dleng::retrieval::to_f64;
use serde_json::Value;

fn dleng(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dleng"))
        .arg("--quiet")
        .args(args)
        .output()
        .unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = dleng(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_SPEC: &str = r#"{
  "name": "cli",
  "seed": 5,
  "dim": 4,
  "seed_classes": 3,
  "heldout_classes": 1,
  "height": 16,
  "width": 16,
  "train_frames": 6,
  "val_frames": 10,
  "test_frames": 4,
  "unknown_frames": 8,
  "object_size": [3, 5],
  "embed_dim": 16
}"#;

const FAST_CONFIG: &str = r#"
[loop]
max_inlier_cells = 1500
max_negative_cells = 3000

[loop.ood]
epochs = 40
hidden = 16

[loop.index]
k = 4
warmup_per_cluster = 4

[loop.continual]
epochs = 30
"#;

fn small_bundle(root: &Path) -> std::path::PathBuf {
    let spec = root.join("spec.json");
    std::fs::write(&spec, SMALL_SPEC).unwrap();
    let data = root.join("data");
    ok_json(&["gen", "--spec", p(&spec), "--out", p(&data)]);
    data
}

#[test]
fn demo_reports_are_identical_across_runs() {
    let a = dleng(&["demo", "--seed", "7"]);
    let b = dleng(&["demo", "--seed", "7"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let report: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["seed"], 7);
    assert_eq!(report["thresholds"]["tau"], 0.0);
    assert_eq!(report["frozen_digest_before"], report["frozen_digest_after"]);
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_bundle(dir.path());
    let pred = dir.path().join("pred");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::copy(data.join("test.truth"), pred.join("test.labels")).unwrap();
    let report_path = dir.path().join("eval.json");
    let v = ok_json(&["eval", "--pred", p(&pred), "--gt", p(&data), "--report", p(&report_path)]);
    assert_eq!(v["miou"]["mean"], 1.0);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(saved, v);
}

#[test]
fn query_at_full_probe_matches_exact_search() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_bundle(dir.path());
    let idx = dir.path().join("image.idx");
    ok_json(&["index", "--store", p(&data.join("image.store")), "--k", "4", "--out", p(&idx)]);
    let index = read_index(&idx).unwrap();
    let reference = index.records()[3].object_id;
    let v = ok_json(&[
        "query", "--index", p(&idx), "--ref", &reference.to_string(), "--n", "10", "--nprobe", "4", "--band", "image",
    ]);
    let got: Vec<u64> = v["hits"].as_array().unwrap().iter().map(|h| h["object_id"].as_u64().unwrap()).collect();
    let exact: Vec<u64> = index
        .exact_topn(&to_f64(&index.records()[3].vector), 10)
        .unwrap()
        .iter()
        .map(|h| h.object_id)
        .collect();
    assert_eq!(got, exact);
    for h in v["hits"].as_array().unwrap() {
        let c = h["cosine"].as_f64().unwrap();
        assert_eq!(h["in_band"].as_bool().unwrap(), (0.7..=1.0).contains(&c));
    }

    let auto = ok_json(&["index", "--store", p(&data.join("image.store")), "--auto-k", "--out", p(&dir.path().join("auto.idx"))]);
    assert!(auto["k"].as_u64().unwrap() >= 1);
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_bundle(dir.path());
    let config = dir.path().join("fast.toml");
    std::fs::write(&config, FAST_CONFIG).unwrap();
    let model = dir.path().join("model.bin");
    let scorer = dir.path().join("scorer.bin");
    ok_json(&["fit", "--data", p(&data), "--config", p(&config), "--out", p(&model)]);
    ok_json(&["fit-ood", "--model", p(&model), "--unknowns", p(&data), "--config", p(&config), "--out", p(&scorer)]);
    let comps = dir.path().join("components.json");
    let d = ok_json(&[
        "detect", "--model", p(&model), "--scorer", p(&scorer), "--data", p(&data), "--tau", "0", "--out", p(&comps),
    ]);
    let detail: Value = serde_json::from_str(&std::fs::read_to_string(&comps).unwrap()).unwrap();
    assert_eq!(detail["component_count"], d["component_count"]);
    assert_eq!(detail["thresholds"]["tau"], 0.0);

    let pred = dir.path().join("pred");
    ok_json(&["predict", "--model", p(&model), "--data", p(&data), "--out", p(&pred)]);
    let e = ok_json(&["eval", "--pred", p(&pred), "--gt", p(&data), "--report", p(&dir.path().join("e.json"))]);
    let miou = e["miou"]["mean"].as_f64().unwrap();
    assert!(miou > 0.0 && miou <= 1.0);

    let state = dir.path().join("state0");
    ok_json(&["init", "--data", p(&data), "--config", p(&config), "--out", p(&state)]);
    let objects: Value = serde_json::from_str(&std::fs::read_to_string(data.join("objects.json")).unwrap()).unwrap();
    let ids: Vec<String> = objects
        .as_array()
        .unwrap()
        .iter()
        .filter(|o| o["class"] == 3 && o["frame_id"].as_str().unwrap().starts_with("val-"))
        .map(|o| o["object_id"].to_string())
        .collect();
    let before = std::fs::read(state.join("state.json")).unwrap();
    let next = dir.path().join("state1");
    let l = ok_json(&[
        "learn", "--state", p(&state), "--data", p(&data), "--class", "novel", "--samples", &ids.join(","),
        "--lambda", "0.1", "--config", p(&config), "--out", p(&next),
    ]);
    assert_eq!(l["generation"], 1);
    assert_eq!(l["report"]["class_id"], 3);
    assert_eq!(l["report"]["lambda"], 0.1);
    assert_eq!(std::fs::read(state.join("state.json")).unwrap(), before);
    let same = dleng(&[
        "learn", "--state", p(&state), "--data", p(&data), "--class", "x", "--samples", &ids[0], "--out", p(&state),
    ]);
    assert_eq!(same.status.code(), Some(5));
}

#[test]
fn failures_print_one_json_line_with_kind_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = dleng(&["fit", "--data", p(&missing), "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    let err: Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(err["error"]["kind"], "io");

    let data = small_bundle(dir.path());
    std::fs::write(data.join("val.labels"), b"garbage").unwrap();
    let out = dleng(&["fit", "--data", p(&data), "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(4));

    let out = dleng(&["demo", "--config", p(&missing)]);
    assert_eq!(out.status.code(), Some(5));
}
