mod common;

use cgn_core::synth::Split;
use cgn_core::trainer::{
    cross_validate, evaluate, read_ablation_csv, read_log, run_ablation, train, DataSplits, PairSet, Trainer, Variant,
    ABLATION_FILE, LOG_FILE,
};
use cgn_core::CgnError;
use common::{tiny_dataset, tiny_train};

#[test]
fn smoke_run_reduces_generator_objective() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 100, 0);
    let rec = train::<f32>(&tiny_train(5, 0), &manifest, None).unwrap();
    let first = rec.epochs[0].losses.total_g;
    let last = rec.epochs[4].losses.total_g;
    assert!(last < first, "total_g {first} -> {last}");
}

#[test]
fn same_seed_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"), 60, 1);
    let cfg = tiny_train(2, 5);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = train::<f32>(&cfg, &manifest, Some(&a)).unwrap();
    let rb = train::<f32>(&cfg, &manifest, Some(&b)).unwrap();
    assert_eq!(ra.best_val_auc.to_bits(), rb.best_val_auc.to_bits());
    assert_eq!(ra.epochs, rb.epochs);
    assert_eq!(ra.test, rb.test);
    assert_eq!(
        std::fs::read(a.join(LOG_FILE)).unwrap(),
        std::fs::read(b.join(LOG_FILE)).unwrap()
    );
    let other = train::<f32>(&tiny_train(2, 6), &manifest, None).unwrap();
    assert_ne!(other.epochs, ra.epochs);
}

#[test]
fn vanilla_never_touches_generative_terms() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 40, 2);
    let cfg = cgn_core::trainer::TrainConfig {
        variant: Variant::Vanilla,
        ..tiny_train(2, 0)
    };
    let rec = train::<f32>(&cfg, &manifest, None).unwrap();
    let c = rec.counters;
    assert_eq!(
        (c.generator, c.discriminator, c.triplet, c.negative_embedding),
        (0, 0, 0, 0)
    );
    assert!(rec.test.fid.is_none());
    for e in &rec.epochs {
        assert_eq!(
            (e.losses.l_ad_g, e.losses.l_ad_d, e.losses.l_ne, e.losses.l_ft),
            (0.0, 0.0, 0.0, 0.0)
        );
    }
    let full = train::<f32>(&tiny_train(1, 0), &manifest, None).unwrap().counters;
    assert!(full.generator > 0 && full.discriminator > 0 && full.triplet > 0 && full.negative_embedding > 0);
}

#[test]
fn generator_and_discriminator_steps_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 40, 3);
    let cfg = tiny_train(1, 0);
    let data = DataSplits::<f32>::from_manifest(&manifest, cfg.model.image_size).unwrap();
    for variant in [Variant::Full, Variant::AdainGan, Variant::Variant1] {
        let mut t = Trainer::<f32>::new(cgn_core::trainer::TrainConfig { variant, ..cfg.clone() }).unwrap();
        let g_ids = t.generator_side_params().to_vec();
        let d_ids = t.discriminator_params().to_vec();
        assert!(g_ids.iter().all(|id| !d_ids.contains(id)));
        for step in 0..3 {
            let idx: Vec<usize> = (step * 8..step * 8 + 8).collect();
            let (xt, xr, labels) = data.train.batch(&idx);
            let (g0, d0) = (t.model.store.fingerprint(&g_ids), t.model.store.fingerprint(&d_ids));
            let (_, batch) = t.g_step(xt, xr, &labels).unwrap();
            let (g1, d1) = (t.model.store.fingerprint(&g_ids), t.model.store.fingerprint(&d_ids));
            assert_ne!(g0, g1, "{variant}: generator step left its parameters unchanged");
            assert_eq!(d0, d1, "{variant}: generator step moved the discriminator");
            t.d_step(&batch.expect("adversarial variant")).unwrap();
            let (g2, d2) = (t.model.store.fingerprint(&g_ids), t.model.store.fingerprint(&d_ids));
            assert_eq!(g1, g2, "{variant}: discriminator step moved generator-side parameters");
            assert_ne!(d1, d2, "{variant}: discriminator step left its parameters unchanged");
        }
    }
}

#[test]
fn logged_totals_and_best_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"), 60, 4);
    let run = dir.path().join("run");
    let rec = train::<f32>(&tiny_train(4, 0), &manifest, Some(&run)).unwrap();
    let rows = read_log(&run.join(LOG_FILE)).unwrap();
    assert!(!rows.is_empty());
    for r in &rows {
        let sum = r.l_ad_g + r.l_ne + r.l_ft + r.l_cls;
        assert!((r.total_g - sum).abs() < 1e-6, "{r:?}");
        assert!((r.total_d - r.l_ad_d).abs() < 1e-6);
    }
    let best = rec.epochs.iter().map(|e| e.val_auc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(rec.best_val_auc, best);
    assert_eq!(rec.epochs[rec.best_epoch - 1].val_auc, best);
    assert!(rec.best_checkpoint.as_ref().unwrap().exists());
    // restored checkpoint reproduces the stored test metrics
    let again = evaluate::<f32>(&run, Split::Test, None).unwrap();
    assert_eq!(again, rec.test);
    let m = &rec.test;
    assert!(m.auc.is_finite() && m.localization_error.is_finite());
    assert!(m.omega_inside.is_finite() && m.omega_outside.is_finite());
    let q = m.fid.unwrap();
    assert!(q.target_reference.is_finite() && q.target_counterfactual_lesion_free.unwrap().is_finite());
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        evaluate::<f32>(dir.path(), Split::Test, None),
        Err(CgnError::MissingCheckpoint(_))
    ));
}

#[test]
fn tiny_run_overfits_its_training_split() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 24, 5);
    // plain classifier path; no checkpoint selection on the tiny val split
    let cfg = cgn_core::trainer::TrainConfig {
        batch_size: 4,
        lr: 3e-3,
        variant: Variant::Vanilla,
        ..tiny_train(1, 0)
    };
    let data = DataSplits::<f32>::from_manifest(&manifest, cfg.model.image_size).unwrap();
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    let order: Vec<usize> = (0..data.train.len()).collect();
    for _ in 0..40 {
        for chunk in order.chunks(4) {
            let (xt, xr, labels) = data.train.batch(chunk);
            t.train_step(xt, xr, &labels).unwrap();
        }
    }
    let auc = t.evaluate(&data.train, "train").unwrap().auc;
    assert!(auc >= 0.99, "train AUC {auc}");
}

#[test]
fn untrained_network_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 300, 6);
    let cfg = tiny_train(1, 0);
    let all: Vec<_> = manifest.entries.iter().collect();
    let set = PairSet::<f32>::load(&manifest, &all, cfg.model.image_size).unwrap();
    for seed in 0..3 {
        let t = Trainer::<f32>::new(cgn_core::trainer::TrainConfig { seed, ..cfg.clone() }).unwrap();
        let auc = t.evaluate(&set, "all").unwrap().auc;
        assert!((0.3..=0.7).contains(&auc), "seed {seed}: {auc}");
    }
}

#[test]
fn ablation_has_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"), 80, 7);
    let out = dir.path().join("grid");
    let (rows, records) = run_ablation::<f32>(&tiny_train(1, 0), &manifest, &Variant::ALL, &[0], Some(&out)).unwrap();
    assert_eq!(rows.len(), Variant::ALL.len());
    for (row, v) in rows.iter().zip(Variant::ALL) {
        assert_eq!(row.variant, v);
        assert_eq!(row.status, "ok");
    }
    assert_eq!(records.len(), Variant::ALL.len());
    assert_eq!(read_ablation_csv(&out.join(ABLATION_FILE)).unwrap(), rows);
}

#[test]
fn failing_variant_becomes_a_failed_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = tiny_dataset(&dir.path().join("data"), 60, 7);
    // single-class validation split: AUC is undefined for every run
    for e in manifest.entries.iter_mut().filter(|e| e.split == Split::Val) {
        e.label = 0;
    }
    let out = dir.path().join("grid");
    let (rows, records) = run_ablation::<f32>(
        &tiny_train(1, 0),
        &manifest,
        &[Variant::Vanilla, Variant::Full],
        &[0, 1],
        Some(&out),
    )
    .unwrap();
    assert_eq!(rows.len(), 2);
    assert!(records.is_empty());
    for r in &rows {
        assert!(r.status.starts_with("failed"), "{}", r.status);
        assert!(r.median_auc.is_nan());
    }
    assert_eq!(read_ablation_csv(&out.join(ABLATION_FILE)).unwrap().len(), 2);
}

#[test]
fn cross_validation_reports_each_fold() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 60, 8);
    let cv = cross_validate::<f32>(&tiny_train(1, 0), &manifest, 5).unwrap();
    assert_eq!(cv.fold_aucs.len(), 5);
    let mean = cv.fold_aucs.iter().sum::<f64>() / 5.0;
    assert!((cv.mean_auc - mean).abs() < 1e-12);
    assert!(cross_validate::<f32>(&tiny_train(1, 0), &manifest, 2).is_err());
}
