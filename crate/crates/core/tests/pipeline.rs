mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use common::tiny_pipeline_config;
use dps_mri::harness::{load_result, run_pipeline, DPS_METHOD, RESULTS_FILE, RESULTS_HEADER};

#[test]
fn pipeline_runs_end_to_end_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_pipeline_config(11);
    let a = run_pipeline(&cfg, &tmp.path().join("a")).unwrap();

    // 4 slices × 2 accelerations × (3 priors + 2 baselines).
    assert_eq!(a.ablation.rows.len(), 4 * 2 * 5);
    // 4 slices × N_s ∈ {1, 2}.
    assert_eq!(a.sweep.as_ref().unwrap().rows.len(), 4 * 2);
    for row in &a.ablation.rows {
        assert!(row.nrmse.is_finite() && row.nrmse > 0.0);
        assert_eq!(row.wall_time_s, 0.0);
    }

    // One checkpoint per (regime, class) serves both accelerations.
    let mut hashes: BTreeMap<(String, String), BTreeSet<String>> = BTreeMap::new();
    for row in a.ablation.rows.iter().filter(|r| r.method == DPS_METHOD) {
        hashes
            .entry((row.regime.clone(), row.class.to_string()))
            .or_default()
            .insert(row.checkpoint_sha256.clone().unwrap());
    }
    assert!(hashes.values().all(|h| h.len() == 1));

    let csv = fs::read_to_string(&a.ablation_report.results_csv).unwrap();
    assert!(csv.starts_with(RESULTS_HEADER));
    let loaded = load_result(&a.workdir.join("ablation")).unwrap();
    assert_eq!(loaded.rows.len(), a.ablation.rows.len());

    let b = run_pipeline(&cfg, &tmp.path().join("b")).unwrap();
    for sub in ["ablation", "sweep"] {
        assert_eq!(
            fs::read(a.workdir.join(sub).join(RESULTS_FILE)).unwrap(),
            fs::read(b.workdir.join(sub).join(RESULTS_FILE)).unwrap(),
            "{sub} results differ between identical runs"
        );
    }

    let c = run_pipeline(&tiny_pipeline_config(12), &tmp.path().join("c")).unwrap();
    assert_ne!(
        fs::read(a.workdir.join("ablation").join(RESULTS_FILE)).unwrap(),
        fs::read(c.workdir.join("ablation").join(RESULTS_FILE)).unwrap()
    );
}

#[test]
fn duplicate_models_are_a_config_error() {
    let mut cfg = tiny_pipeline_config(1);
    cfg.models.push(cfg.models[0]);
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(run_pipeline(&cfg, tmp.path()), Err(dps_mri::Error::Config(_))));
}
