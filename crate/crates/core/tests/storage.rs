use dleng::grid::LabelGrid;
use dleng::io::container::write_label_grids;
use dleng::io::manifest::{read_bundle, write_bundle, Manifest};
use dleng::io::state::{load_state, save_state, StateManifest, STATE_FILE};
use dleng::pipeline::{build_state, LoopConfig, LoopState};
use dleng::synth::{generate_scenario, ScenarioBundle, ScenarioSpec};
use dleng::Error;

fn tiny() -> (ScenarioBundle, LoopState) {
    let spec = ScenarioSpec {
        name: "tiny".into(),
        seed: 2,
        dim: 3,
        seed_classes: 2,
        heldout_classes: 1,
        height: 12,
        width: 12,
        train_frames: 4,
        val_frames: 6,
        test_frames: 2,
        unknown_frames: 4,
        object_size: (3, 4),
        embed_dim: 8,
        ..ScenarioSpec::default()
    };
    let bundle = generate_scenario(&spec).unwrap();
    let mut config = LoopConfig::default();
    config.ood.epochs = 5;
    config.ood.hidden = 8;
    config.index.k = 2;
    config.index.warmup_per_cluster = 2;
    let state = build_state(&bundle, &config).unwrap();
    (bundle, state)
}

#[test]
fn state_generations_replace_files_and_round_trip() {
    let (_, state) = tiny();
    let dir = tempfile::tempdir().unwrap();
    save_state(&state, 0, dir.path()).unwrap();
    assert!(dir.path().join("model.0.bin").exists());
    let m = save_state(&state, 1, dir.path()).unwrap();
    assert!(!dir.path().join("model.0.bin").exists());
    assert!(dir.path().join("model.1.bin").exists());
    let (loaded, manifest) = load_state(dir.path()).unwrap();
    assert_eq!(loaded, state);
    assert_eq!(manifest, m);
    assert_eq!(StateManifest::read(dir.path()).unwrap().generation, 1);
}

#[test]
fn state_rejects_tampering() {
    let (_, state) = tiny();
    let dir = tempfile::tempdir().unwrap();
    let m = save_state(&state, 3, dir.path()).unwrap();

    let text = std::fs::read_to_string(dir.path().join(STATE_FILE)).unwrap();
    let bad_digest = text.replace(&m.model_digest, &"0".repeat(64));
    std::fs::write(dir.path().join(STATE_FILE), &bad_digest).unwrap();
    assert!(matches!(load_state(dir.path()), Err(Error::InvalidInput(_))));

    let swapped = text
        .replace(&m.image_index, "IMAGE")
        .replace(&m.text_index, &m.image_index)
        .replace("IMAGE", &m.text_index);
    std::fs::write(dir.path().join(STATE_FILE), swapped).unwrap();
    assert!(matches!(load_state(dir.path()), Err(Error::InvalidInput(_))));

    let extra = text.replacen('{', "{\n  \"surprise\": 1,", 1);
    std::fs::write(dir.path().join(STATE_FILE), extra).unwrap();
    assert!(matches!(load_state(dir.path()), Err(Error::Json(_))));

    std::fs::write(dir.path().join(STATE_FILE), &text).unwrap();
    std::fs::remove_file(dir.path().join(&m.heads)).unwrap();
    assert!(matches!(load_state(dir.path()), Err(Error::Io(_))));
}

#[test]
fn bundle_manifest_validation() {
    let (bundle, _) = tiny();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_bundle(&bundle, dir.path()).unwrap();
    manifest.validate(dir.path()).unwrap();
    assert_eq!(Manifest::read(dir.path()).unwrap(), manifest);
    let back = read_bundle(dir.path()).unwrap();
    assert_eq!(back.objects, bundle.objects);
    assert_eq!(back.image_records, bundle.image_records);

    // label files may only use registered ids or the reserved labels
    let bad = LabelGrid::filled("train-0", 12, 12, 40);
    write_label_grids(&dir.path().join("train.labels"), &[bad]).unwrap();
    assert!(matches!(manifest.validate(dir.path()), Err(Error::UnknownClass(40))));

    write_bundle(&bundle, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("image.store")).unwrap();
    assert!(matches!(read_bundle(dir.path()), Err(Error::Io(_))));
}
