use std::fs;
use std::sync::Mutex;

use slidecube::experiment::{read_results, run_ablation, AblationConfig, Outcome, MAPS_DIR, RESULTS_FILE, SUMMARY_FILE};
use slidecube::preprocess::ChannelSet;
use slidecube::synthgen::{gen_scene, SceneSpec};

fn tiny_config() -> AblationConfig {
    AblationConfig {
        sets: vec![ChannelSet::VvVh, ChannelSet::DemOnly],
        ks: vec![1, 2],
        seeds: vec![0, 1],
        base_width: 4,
        depth: 2,
        epochs: 1,
        batch_size: 4,
        chip_size: 16,
        test_fraction: 0.25,
        max_maps: 2,
        ..AblationConfig::default()
    }
}

fn tiny_scene(dir: &std::path::Path) -> slidecube::cube_store::Datacube {
    let spec = SceneSpec {
        shape: (64, 64),
        n_pre: 2,
        n_post: 2,
        slope_threshold: 5.0,
        ..SceneSpec::default()
    };
    gen_scene(&spec, &dir.join("cube")).unwrap()
}

#[test]
fn grid_runs_end_to_end_and_resumes_without_retraining() {
    let tmp = tempfile::tempdir().unwrap();
    let cube = tiny_scene(tmp.path());
    let cfg = tiny_config();
    let out = tmp.path().join("ablation");

    let trained = Mutex::new(Vec::new());
    let first = run_ablation(&cube, &cfg, &out, &|row| trained.lock().unwrap().push(row.key())).unwrap();
    assert_eq!(first.rows.len(), 8);
    assert_eq!(trained.lock().unwrap().len(), 8);
    for row in &first.rows {
        let auprc = row.auprc.auprc().expect("no timeouts or divergence in the tiny grid");
        assert!((0.0..=1.0).contains(&auprc));
        assert!(row.prevalence > 0.0 && row.prevalence < 1.0);
    }
    // DemOnly ignores k, so both k share one run per seed
    for seed in [0, 1] {
        let a = first.row(ChannelSet::DemOnly, 1, seed).unwrap();
        let b = first.row(ChannelSet::DemOnly, 2, seed).unwrap();
        assert_eq!(a.auprc, b.auprc);
    }
    assert!(out.join(SUMMARY_FILE).is_file());
    let maps = out.join(MAPS_DIR).join("vvvh_k2_seed1");
    assert!(maps.join("chip000_score.pgm").is_file());
    assert!(maps.join("chip001_mask.pgm").is_file());
    let csv = fs::read_to_string(out.join(RESULTS_FILE)).unwrap();

    // a complete grid resumes to the same report with no training
    let again = Mutex::new(0);
    let second = run_ablation(&cube, &cfg, &out, &|_| *again.lock().unwrap() += 1).unwrap();
    assert_eq!(*again.lock().unwrap(), 0);
    assert_eq!(second.rows, first.rows);
    assert_eq!(fs::read_to_string(out.join(RESULTS_FILE)).unwrap(), csv);

    // dropping one finished row retrains just that cell, reproducibly
    let mut rows = read_results(&out.join(RESULTS_FILE)).unwrap();
    let dropped = rows.remove(3);
    slidecube::experiment::write_results(&out.join(RESULTS_FILE), &rows).unwrap();
    let redone = Mutex::new(Vec::new());
    let third = run_ablation(&cube, &cfg, &out, &|row| redone.lock().unwrap().push(row.key())).unwrap();
    assert_eq!(*redone.lock().unwrap(), vec![dropped.key()]);
    let again = third.row(dropped.channel_set, dropped.k, dropped.seed).unwrap();
    assert_eq!(again.auprc, dropped.auprc);
    assert_eq!(third.rows.len(), 8);
}

#[test]
fn exhausted_time_budget_is_recorded_not_raised() {
    let tmp = tempfile::tempdir().unwrap();
    let cube = tiny_scene(tmp.path());
    let cfg = AblationConfig {
        sets: vec![ChannelSet::VvVh],
        ks: vec![1],
        seeds: vec![0],
        epochs: 50,
        time_limit_secs: Some(0.0),
        ..tiny_config()
    };
    let result = run_ablation(&cube, &cfg, &tmp.path().join("out"), &|_| {}).unwrap();
    assert_eq!(result.rows.len(), 1);
    assert_eq!(result.rows[0].auprc, Outcome::Timeout);
    let text = fs::read_to_string(tmp.path().join("out").join(RESULTS_FILE)).unwrap();
    assert!(text.contains(",timeout,"));
}

#[test]
fn unusable_grids_fail_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cube = tiny_scene(tmp.path());
    let out = tmp.path().join("out");
    let empty = AblationConfig { seeds: vec![], ..tiny_config() };
    assert!(run_ablation(&cube, &empty, &out, &|_| {}).is_err());
    // k beyond the two acquisitions on either side of the event
    let too_deep = AblationConfig { ks: vec![3], ..tiny_config() };
    assert!(run_ablation(&cube, &too_deep, &out, &|_| {}).is_err());
    assert!(!out.join(RESULTS_FILE).exists());
}
