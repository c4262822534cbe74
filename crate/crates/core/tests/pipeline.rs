use std::fs;

use cloudloc_core::config::Config;
use cloudloc_core::eval::pipeline::{run_pipeline, run_synthetic, StageStatus, MODEL, REPORT, TABLE_CSV, TABLE_TXT};
use cloudloc_core::eval::synth::SynthConfig;
use cloudloc_core::geometry::position_error;
use cloudloc_core::matcher::{DescriptorMatcher, ForestParams};
use cloudloc_core::pose::localize;
use cloudloc_core::Error;

fn small_config() -> Config {
    let mut c = Config {
        synth: SynthConfig {
            landmarks: 400,
            train_views: 10,
            query_views: 3,
            max_observations: 100,
            min_visible: 40,
            ..Default::default()
        },
        ..Default::default()
    };
    c.train.grid = vec![ForestParams {
        n_trees: 20,
        features_per_split: Some(40),
        ..Default::default()
    }];
    c
}

#[test]
fn synthetic_run_resumes_and_is_deterministic() {
    let config = small_config();
    let a = tempfile::tempdir().unwrap();
    let (scene, first) = run_synthetic(&config, 5, a.path()).unwrap();
    assert!(first.stages.iter().all(|s| s.status != StageStatus::Cached));
    let summary = &first.report.summary;
    assert_eq!(summary.total, 3);
    assert_eq!(summary.localized, 3, "{summary:?}");
    assert!(summary.position.unwrap().median < 0.01 * scene.diameter());
    assert!(summary.rotation.unwrap().median < 1.0);
    for name in [TABLE_TXT, TABLE_CSV] {
        assert!(a.path().join(name).exists());
    }

    // Unchanged inputs: every stage is served from its stamp.
    let report_bytes = fs::read(a.path().join(REPORT)).unwrap();
    let (_, second) = run_synthetic(&config, 5, a.path()).unwrap();
    for s in &second.stages {
        assert_ne!(s.status, StageStatus::Ran, "{s:?}");
    }
    assert_eq!(fs::read(a.path().join(REPORT)).unwrap(), report_bytes);

    // A changed localization setting reruns localization and evaluation only.
    let mut changed = config.clone();
    changed.localize.seed = 1;
    let (_, third) = run_synthetic(&changed, 5, a.path()).unwrap();
    let ran: Vec<&str> = third
        .stages
        .iter()
        .filter(|s| s.status == StageStatus::Ran)
        .map(|s| s.stage.as_str())
        .collect();
    assert_eq!(ran, ["localize", "evaluate"]);

    // Same seed in a fresh directory: byte-identical report.
    let b = tempfile::tempdir().unwrap();
    run_synthetic(&config, 5, b.path()).unwrap();
    assert_eq!(fs::read(b.path().join(REPORT)).unwrap(), report_bytes);

    // A training view localizes almost exactly.
    let matcher = DescriptorMatcher::load(a.path().join(MODEL)).unwrap();
    let view = &scene.tracks.images[0];
    let r = localize(
        &scene.desc2d[&view.id],
        &matcher,
        &scene.desc3d,
        &view.intrinsics,
        &config.matching,
        &config.localize,
    )
    .unwrap();
    assert!(r.is_localized());
    assert!(position_error(&view.pose.center, &r.pose.unwrap().center) < 0.005 * scene.diameter());
}

#[test]
fn missing_inputs_are_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_pipeline(&Config::default(), dir.path()).unwrap_err();
    assert!(err.is_invalid_input());
    assert!(err.to_string().contains("inputs.tracks"));
}

#[test]
fn stage_failures_name_the_stage() {
    let mut config = small_config();
    // Every pair is closer than beta, so no negatives can be drawn and the
    // held-out split has one class.
    config.mining.alpha = Some(1e-3);
    config.mining.beta = Some(1e6);
    let dir = tempfile::tempdir().unwrap();
    let err = run_synthetic(&config, 2, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "train", .. }), "{err}");
    assert!(!err.is_invalid_input());
}
