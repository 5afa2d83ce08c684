mod common;

use candle_core::DType;
use common::*;
use ovd_core::presence::Presence;
use ovd_core::pseudo_label::PseudoLabelConfig;
use ovd_core::synthetic::SyntheticCatalog;
use ovd_detector::checkpoint;
use ovd_detector::data::prepare;
use ovd_detector::eval::{predict, EvalOptions};
use ovd_detector::train::{class_pool, parameter_snapshot, read_audit_log, Trainer};
use ovd_detector::Detector;

#[test]
fn disabled_engine_reproduces_single_pass_loss() {
    let cfg = small_train_config();
    let samples: Vec<_> = small_samples(4, 11).iter().map(|s| prepare(s, cfg.model.input_size)).collect();
    let batch: Vec<_> = samples.iter().collect();
    let reference = reference_loss(&cfg, 5, &batch);

    let (off, _) = trainer(&cfg, false, 5).batch_loss(&batch).unwrap();
    assert_eq!(off.to_scalar::<f32>().unwrap().to_bits(), reference.to_bits());

    // engine on but inert: nothing can clear C = 1 and no substitutions
    let mut inert = cfg.clone();
    inert.pseudo_label = PseudoLabelConfig { confidence_threshold: 1.0, max_substitutions: 0, ..Default::default() };
    let mut t = trainer(&inert, true, 5);
    let (on, stats) = t.batch_loss(&batch).unwrap();
    assert_eq!(on.to_scalar::<f32>().unwrap().to_bits(), reference.to_bits());
    assert_eq!(stats.audit.injected + stats.audit.substituted, 0);
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let mut cfg = small_train_config();
    cfg.batch_size = 8;
    let samples: Vec<_> = small_samples(8, 3).iter().map(|s| prepare(s, cfg.model.input_size)).collect();
    let batch: Vec<_> = samples.iter().collect();
    let mut t = trainer(&cfg, false, 1);
    let first = t.train_step(&batch).unwrap().loss.total;
    let mut last = first;
    for _ in 0..40 {
        last = t.train_step(&batch).unwrap().loss.total;
    }
    assert!(last < 0.6 * first, "{first} -> {last}");
}

#[test]
fn fit_writes_audit_log_and_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train_config();
    let samples = small_samples(8, 4);
    let run = |log: &std::path::Path| {
        let mut t = trainer(&cfg, true, 2);
        let stats = t.fit(&samples, Some(log), |_, _| Ok(())).unwrap();
        (stats, parameter_snapshot(t.model()).unwrap())
    };
    let (a, pa) = run(&dir.path().join("a.jsonl"));
    let (b, pb) = run(&dir.path().join("b.jsonl"));
    assert_eq!(pa, pb);
    assert_eq!(a.len(), 2);
    let logged = read_audit_log(&dir.path().join("a.jsonl")).unwrap();
    assert_eq!(logged.len(), 2);
    for (x, y) in logged.iter().zip(&b) {
        assert_eq!(x.epoch, y.epoch);
        assert_eq!(x.audit, y.audit);
        assert_eq!(x.images, 8);
        let c = &x.audit;
        assert_eq!(c.unmatched, c.injected + c.substituted + c.low_confidence + c.box_filtered + c.cap_reached + c.no_free_negative + c.not_a_class);
    }
}

#[test]
fn checkpoint_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train_config();
    let samples = small_samples(6, 8);
    let mut t = trainer(&cfg, false, 0);
    t.fit(&samples, None, |_, _| Ok(())).unwrap();
    let path = dir.path().join("model.safetensors");
    checkpoint::save(t.model(), &path, 2, Some(&cfg)).unwrap();
    let (loaded, info) = checkpoint::load(&path, Some(&cfg.model)).unwrap();
    assert_eq!(info.epoch, 2);
    assert_eq!(info.fingerprint, cfg.model.fingerprint());

    let encoder = aligned_encoder(cfg.model.embed_dim);
    let partition = ovd_detector::eval::ClassPartition { base: class_pool(&samples, &[]), novel: vec![] };
    let vocab = ovd_detector::eval::partition_vocabulary(&partition, &encoder, &Default::default()).unwrap();
    let prepared: Vec<_> = samples.iter().map(|s| prepare(s, cfg.model.input_size)).collect();
    let refs: Vec<_> = prepared.iter().collect();
    let before = predict(t.model(), &refs, &vocab, &EvalOptions::default()).unwrap();
    let after = predict(&loaded, &refs, &vocab, &EvalOptions::default()).unwrap();
    assert_eq!(before, after);

    let mut other = cfg.model.clone();
    other.embed_dim = 32;
    assert!(matches!(checkpoint::load(&path, Some(&other)), Err(ovd_detector::DetectorError::Fingerprint { .. })));
}

#[test]
fn trainer_rejects_mismatched_encoder_and_missing_matrix() {
    let cfg = small_train_config();
    let model = || Detector::new(&cfg.model, DType::F32, 0).unwrap();
    let pool = SyntheticCatalog::default().names();
    let wrong = Trainer::new(model(), cfg.clone(), Box::new(aligned_encoder(8)), Some(catalogue_matrix("toy", Presence::Annotated)), pool.clone());
    assert!(matches!(wrong, Err(ovd_detector::DetectorError::Dimension { expected: 16, got: 8 })));
    let no_matrix = Trainer::new(model(), cfg.clone(), Box::new(aligned_encoder(16)), None, pool);
    assert!(matches!(no_matrix, Err(ovd_detector::DetectorError::Config(_))));
}
