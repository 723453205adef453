use std::path::Path;

use mocolab_core::encoder::Arch;
use mocolab_core::harness::{
    ablate_shuffle_bn, plan_sweep_k, resume_experiment, run_experiment, run_from, sweep_k, sweep_momentum,
    Checkpoint, DataConfig, ExperimentConfig, MetricsFile, RowKind, Start, SweepTable, CHECKPOINT_FILE,
    METRICS_FILE, SUMMARY_FILE,
};
use mocolab_core::{Error, MechanismKind};

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(
        r#"{
            "queue_size": 64,
            "batch_size": 16,
            "epochs": 2,
            "bn_shards": 2,
            "encoder": { "arch": { "mlp": { "widths": [16] } }, "input_shape": [8], "feature_dim": 8 },
            "data": { "synthetic": {
                "spec": { "n_classes": 4, "n_per_class": 50, "shape": [8], "class_sep": 3.0, "noise_sigma": 1.0, "seed": 1 },
                "train": 160, "val": 40 } },
            "eval": { "knn_k": 5, "probe": false },
            "deterministic": true
        }"#,
    )
    .unwrap();
    cfg.seed = 3;
    cfg
}

fn losses(dir: &Path) -> Vec<(u64, f64)> {
    MetricsFile::read(&dir.join(METRICS_FILE))
        .unwrap()
        .steps()
        .map(|r| (r.step, r.loss.unwrap()))
        .collect()
}

#[test]
fn unknown_keys_are_config_errors_at_every_level() {
    for text in [
        r#"{"queue_sise": 16}"#,
        r#"{"lr": {"initial": 0.1, "warmup": 3}}"#,
        r#"{"eval": {"probe_config": {"lrs": [1.0], "nesterov": true}}}"#,
        r#"{"data": {"synthetic": {"spec": {"classes": 3}}}}"#,
    ] {
        assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))), "{text}");
    }
    assert!(ExperimentConfig::from_json("{}").is_ok());
}

#[test]
fn invalid_values_are_config_errors() {
    for text in [
        r#"{"momentum": 1.0}"#,
        r#"{"temperature": 0.0}"#,
        r#"{"batch_size": 18, "bn_shards": 4}"#,
        r#"{"schema_version": 7}"#,
    ] {
        assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn hash_tracks_content_and_survives_a_round_trip() {
    let a = tiny();
    let b = ExperimentConfig::from_json(&a.to_json()).unwrap();
    assert_eq!(a.hash(), b.hash());
    let mut c = a.clone();
    c.momentum = 0.99;
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn deterministic_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let s1 = run_experiment(&cfg, &dir.path().join("a")).unwrap();
    let s2 = run_experiment(&cfg, &dir.path().join("b")).unwrap();
    let a = std::fs::read(&s1.metrics_path).unwrap();
    assert_eq!(a, std::fs::read(&s2.metrics_path).unwrap());
    assert_eq!(
        std::fs::read(&s1.checkpoint_path).unwrap(),
        std::fs::read(&s2.checkpoint_path).unwrap()
    );
    assert_eq!(s1.steps, 20);

    let mut other = cfg.clone();
    other.seed = 4;
    let s3 = run_experiment(&other, &dir.path().join("c")).unwrap();
    assert_ne!(a, std::fs::read(&s3.metrics_path).unwrap());
}

#[test]
fn metrics_header_carries_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    run_experiment(&cfg, dir.path()).unwrap();
    let f = MetricsFile::read(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(f.header.config_hash, cfg.hash());
    assert_eq!(f.header.effective_k, 64);
    assert_eq!(f.steps().count(), 20);
    // one kNN row per epoch
    assert_eq!(f.rows.iter().filter(|r| r.kind == RowKind::Eval).count(), 2);
    assert!(dir.path().join(SUMMARY_FILE).exists());
}

#[test]
fn resume_matches_the_uninterrupted_run() {
    for mech in [MechanismKind::Moco, MechanismKind::EndToEnd, MechanismKind::MemoryBank] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.mechanism = mech;
        cfg.shuffle_bn = mech != MechanismKind::MemoryBank;
        run_experiment(&cfg, &dir.path().join("full")).unwrap();
        run_from(&cfg, &dir.path().join("part"), Start::Fresh, Some(13)).unwrap();
        let ck = Checkpoint::load(&dir.path().join("part").join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.step, 13);
        resume_experiment(&cfg, &ck, &dir.path().join("rest")).unwrap();
        let full = losses(&dir.path().join("full"));
        let rest = losses(&dir.path().join("rest"));
        assert_eq!(rest.len(), 7, "{mech:?}");
        for ((s1, a), (s2, b)) in full[13..].iter().zip(&rest) {
            assert_eq!(s1, s2);
            assert!((a - b).abs() <= 1e-5 * a.abs(), "{mech:?} step {s1}: {a} vs {b}");
        }
    }
}

#[test]
fn resume_with_a_different_architecture_is_a_consistency_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    run_from(&cfg, dir.path(), Start::Fresh, Some(5)).unwrap();
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let mut wider = cfg.clone();
    wider.encoder.arch = Arch::Mlp { widths: vec![24] };
    let err = resume_experiment(&wider, &ck, &dir.path().join("x")).unwrap_err();
    assert!(matches!(err, Error::Consistency(_)), "{err}");
    let mut reseeded = cfg;
    reseeded.seed = 9;
    let err = resume_experiment(&reseeded, &ck, &dir.path().join("y")).unwrap_err();
    assert!(matches!(err, Error::Consistency(_)), "{err}");
}

#[test]
fn huge_learning_rate_is_reported_as_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.lr.initial = 1e12;
    let s = run_experiment(&cfg, dir.path()).unwrap();
    assert!(s.diverged(), "{:?}", s.status);
    let f = MetricsFile::read(&s.metrics_path).unwrap();
    assert!(f.diverged());
}

#[test]
fn sweep_table_is_a_function_of_the_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let table = sweep_k(&cfg, &[16, 64], &[MechanismKind::Moco, MechanismKind::MemoryBank], &[0, 1], dir.path()).unwrap();
    assert_eq!(SweepTable::from_dir(dir.path()).unwrap(), table);
    for mech in [MechanismKind::Moco, MechanismKind::MemoryBank] {
        for k in [16.0, 64.0] {
            let row = table.row(mech, k).unwrap();
            assert_eq!(row.runs, 2);
            assert_eq!(row.knn.len(), 2);
            let mean = row.knn.iter().sum::<f64>() / 2.0;
            assert!((row.knn_mean.unwrap() - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn k_sweep_skips_queues_smaller_than_a_batch() {
    let mut cfg = tiny();
    cfg.batch_size = 32;
    let cells = plan_sweep_k(&cfg, &[16, 64], &[MechanismKind::Moco, MechanismKind::EndToEnd], &[0]).unwrap();
    let moco16 = cells.iter().find(|c| c.mechanism == MechanismKind::Moco && c.value == 16.0).unwrap();
    assert!(moco16.note.as_deref().unwrap_or("").contains("skipped"));
    let moco64 = cells.iter().find(|c| c.mechanism == MechanismKind::Moco && c.value == 64.0).unwrap();
    assert!(moco64.note.is_none());
    // end-to-end takes its K from the batch: K = N − 1
    for c in cells.iter().filter(|c| c.mechanism == MechanismKind::EndToEnd && c.note.is_none()) {
        let n = c.config.as_ref().unwrap().batch_size;
        assert!(n - 1 >= c.value as usize && n % cfg.bn_shards == 0);
    }
    assert!(matches!(plan_sweep_k(&cfg, &[64, 16], &[MechanismKind::Moco], &[0]), Err(Error::Config(_))));
}

#[test]
fn momentum_sweep_and_shuffle_ablation_produce_paired_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let t = sweep_momentum(&cfg, &[0.0, 0.99], &[0], &dir.path().join("m")).unwrap();
    assert!(t.row(MechanismKind::Moco, 0.0).unwrap().oscillation_mean.is_some());
    assert!(t.row(MechanismKind::Moco, 0.99).is_some());
    let ab = ablate_shuffle_bn(&cfg, &[0], &dir.path().join("bn")).unwrap();
    assert_eq!(ab.curves.len(), 1);
    let c = &ab.curves[0].1;
    assert_eq!(c.with_shuffle.len(), 2);
    assert_eq!(c.without_shuffle.len(), 2);
    let mut bank = cfg;
    bank.mechanism = MechanismKind::MemoryBank;
    assert!(matches!(ablate_shuffle_bn(&bank, &[0], &dir.path().join("x")), Err(Error::Config(_))));
}

#[test]
fn idx_data_source_trains_like_the_synthetic_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let (train, val) = mocolab_core::harness::load_data::<f64>(&cfg).unwrap();
    let p = mocolab_core::harness::IdxPaths::in_dir(dir.path());
    mocolab_core::data::write_idx(&train, &p.train_images, Some(&p.train_labels)).unwrap();
    mocolab_core::data::write_idx(&val, &p.val_images, Some(&p.val_labels)).unwrap();
    let mut idx = cfg.clone();
    idx.data = DataConfig::Idx(p);
    // stored as 1 × 8 images, read back as 8-vectors
    let (tr, _) = mocolab_core::harness::load_data::<f64>(&idx).unwrap();
    assert_eq!(tr.sample_shape(), &[8]);
    assert!(tr.all().data().iter().zip(train.all().data()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    let s = run_experiment(&idx, &dir.path().join("run")).unwrap();
    assert_eq!(s.steps, 20);
    assert!(s.final_knn.unwrap() > 0.25);
}
