use std::collections::BTreeMap;

use vidal_core::active_loop::{LoopSettings, LoopState};
use vidal_core::detector::{
    generate_ground_truth, LearningDecay, NoiseParams, NoiseProfile, SceneConfig, SyntheticDetector,
};
use vidal_core::formats::{load_state, persist_state, to_json_bytes, StateDocument};
use vidal_core::model::{GroundTruthFrame, VideoMeta};
use vidal_core::strategy::{StrategyConfig, StrategyKind};
use vidal_core::Error;

fn run_iterations(n: usize) -> (LoopState, SyntheticDetector) {
    let meta = VideoMeta::new(200, 150, 120, vec!["person".into(), "car".into(), "dog".into()]).unwrap();
    let gt = generate_ground_truth(&meta, &SceneConfig::default(), 11);
    let noise = NoiseParams {
        p_miss: 0.1,
        p_spurious: 0.4,
        jitter_sigma: 0.08,
        class_temperature: 0.6,
    };
    let detector = SyntheticDetector::new(
        meta.clone(),
        gt,
        NoiseProfile::uniform(120, noise),
        LearningDecay { d0: 10.0, floor: 0.1 },
        4,
    )
    .unwrap();
    let mut settings = LoopSettings::new(meta, StrategyConfig::new(StrategyKind::S1Dynamic));
    settings.split_seed = 8;
    let mut state = LoopState::initialize(settings).unwrap();
    let label = |state: &mut LoopState, frames: Vec<usize>| {
        let labels: Vec<GroundTruthFrame> =
            frames.iter().map(|&f| detector.ground_truth(f).clone()).collect();
        state.ingest_annotations(&labels).unwrap();
    };
    let guiding: Vec<usize> = state.pending().iter().copied().collect();
    label(&mut state, guiding);
    for _ in 0..n {
        let request = state.detection_request();
        let dets = detector.detect(&request, state.labeled(), state.iteration() as u64);
        let outcome = state.run_iteration(&dets).unwrap();
        label(&mut state, outcome.batch);
        state.record_map(0.5 + state.iteration() as f64 / 100.0);
    }
    (state, detector)
}

#[test]
fn three_iterations_round_trip() {
    let (state, _) = run_iterations(3);
    assert_eq!(state.iteration(), 4);
    assert_eq!(state.history().len(), 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    persist_state(&state, &path).unwrap();
    let loaded = load_state(&path).unwrap();
    assert_eq!(loaded, state);
    assert_eq!(loaded.history(), state.history());
    assert_eq!(loaded.annotations(), state.annotations());
}

#[test]
fn re_save_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    for n in [0, 2] {
        let (state, _) = run_iterations(n);
        let first = dir.path().join(format!("a{n}.json"));
        let second = dir.path().join(format!("b{n}.json"));
        persist_state(&state, &first).unwrap();
        persist_state(&load_state(&first).unwrap(), &second).unwrap();
        assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    }
}

#[test]
fn pending_batch_survives_a_restart() {
    let (mut state, detector) = run_iterations(1);
    let request = state.detection_request();
    let dets = detector.detect(&request, state.labeled(), state.iteration() as u64);
    let outcome = state.run_iteration(&dets).unwrap();
    // annotate half the batch, then "restart"
    let half: Vec<GroundTruthFrame> = outcome.batch[..5]
        .iter()
        .map(|&f| detector.ground_truth(f).clone())
        .collect();
    state.ingest_annotations(&half).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    persist_state(&state, &path).unwrap();
    let mut loaded = load_state(&path).unwrap();
    assert_eq!(loaded.pending().len(), 5);
    let rest: Vec<GroundTruthFrame> = outcome.batch[5..]
        .iter()
        .map(|&f| detector.ground_truth(f).clone())
        .collect();
    let ingest = loaded.ingest_annotations(&rest).unwrap();
    assert!(ingest.iteration_complete);
}

#[test]
fn truncated_file_fails_without_touching_the_original() {
    let (state, _) = run_iterations(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    persist_state(&state, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let truncated = dir.path().join("truncated.json");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let err = load_state(&truncated).unwrap_err();
    assert!(matches!(err, Error::Json { .. }), "{err}");
    assert_eq!(std::fs::read(&truncated).unwrap(), &bytes[..bytes.len() / 2]);
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    // a failed save leaves the previous file in place
    let missing_dir = dir.path().join("nope").join("state.json");
    assert!(persist_state(&state, &missing_dir).is_err());
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 2, "no temporary files may be left behind");
}

#[test]
fn version_mismatch_and_broken_partitions_are_rejected() {
    let (state, _) = run_iterations(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");

    let mut doc = StateDocument::from(&state);
    doc.schema = "vidal.state.v0".into();
    std::fs::write(&path, to_json_bytes(&doc).unwrap()).unwrap();
    assert!(matches!(load_state(&path).unwrap_err(), Error::Schema { .. }));

    let mut doc = StateDocument::from(&state);
    let stolen = doc.unlabeled[0];
    doc.test.push(stolen);
    doc.test.sort_unstable();
    std::fs::write(&path, to_json_bytes(&doc).unwrap()).unwrap();
    assert!(matches!(load_state(&path).unwrap_err(), Error::CorruptState(_)));

    let mut doc = StateDocument::from(&state);
    let frame = doc.labeled[0];
    doc.annotations.remove(&frame);
    std::fs::write(&path, to_json_bytes(&doc).unwrap()).unwrap();
    assert!(matches!(load_state(&path).unwrap_err(), Error::CorruptState(_)));

    let mut value: serde_json::Value = serde_json::to_value(StateDocument::from(&state)).unwrap();
    value["surprise"] = serde_json::json!(1);
    std::fs::write(&path, serde_json::to_vec(&value).unwrap()).unwrap();
    assert!(load_state(&path).is_err());
}

#[test]
fn state_file_has_the_documented_fields() {
    let (state, _) = run_iterations(1);
    let value = serde_json::to_value(StateDocument::from(&state)).unwrap();
    for key in [
        "schema",
        "meta",
        "strategy",
        "iteration",
        "labeled",
        "unlabeled",
        "test",
        "annotations",
        "history",
    ] {
        assert!(value.get(key).is_some(), "state file misses {key}");
    }
    assert_eq!(value["schema"], "vidal.state.v1");
    let annotations: BTreeMap<String, serde_json::Value> =
        serde_json::from_value(value["annotations"].clone()).unwrap();
    assert_eq!(annotations.len(), state.labeled().len());
    let first = annotations
        .values()
        .find(|v| !v.as_array().unwrap().is_empty())
        .unwrap();
    assert!(first[0]["bbox"].as_array().unwrap().len() == 4);
    assert!(first[0]["class"].is_u64());
}
