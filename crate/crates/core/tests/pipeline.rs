use sidlab_core::audiofeat::{load_corpus, save_corpus, DatasetSpec};
use sidlab_core::harness::{
    build_corpus, generate_fake_audio, recon_generator, run_ablation, run_method_comparison,
    split_corpus, ExperimentConfig, Method,
};
use sidlab_core::speakernet::SpeakerClassifier;
use sidlab_core::substitute::LossVariant;

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        dataset: DatasetSpec {
            n_speakers: 3,
            utterances_per_speaker: 5,
            ..Default::default()
        },
        train_contents: 3,
        seeds: vec![0, 1],
        ..Default::default()
    };
    c.blackbox.epochs = 8;
    c.substitute.epochs = 4;
    c.generator_train.epochs = 4;
    c.comparison.joint_epochs = 2;
    c.perturbation.lr = 0.02;
    c.perturbation.max_iters = 20;
    c
}

#[test]
fn method_comparison_is_deterministic_and_complete() {
    let cfg = tiny();
    let corpus = build_corpus(&cfg.dataset, &cfg.features).unwrap();
    let a = run_method_comparison(&cfg, &corpus).unwrap();
    let b = run_method_comparison(&cfg, &corpus).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_text(), b.to_text());
    assert_eq!(a.rows.len(), 5);
    assert_eq!(a.to_jsonl().lines().count(), 5 * 2);
    for r in &a.reports {
        assert_eq!(r.report.n_total, 3 * 2);
        let flags = r.report.per_sample.iter().filter(|s| s.success).count();
        assert_eq!(flags, r.report.n_success);
    }
    assert!(a.to_text().contains(Method::PostHocPgd.label()));
}

#[test]
fn ablation_has_one_row_per_variant() {
    let cfg = tiny();
    let corpus = build_corpus(&cfg.dataset, &cfg.features).unwrap();
    let t = run_ablation(&cfg, &corpus).unwrap();
    assert_eq!(t, run_ablation(&cfg, &corpus).unwrap());
    for v in LossVariant::ALL {
        assert_eq!(t.row(v).per_seed.len(), 2);
    }
    assert_eq!(t.oracle_accuracy.len(), 2);
    assert_eq!(t.to_text().lines().count(), 2 + 3 + 1);
}

#[test]
fn persisted_corpus_reloads_exactly() {
    let cfg = tiny();
    let corpus = build_corpus(&cfg.dataset, &cfg.features).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_corpus(dir.path(), &corpus, cfg.dataset.seed).unwrap();
    assert_eq!(load_corpus(dir.path()).unwrap(), corpus);
}

#[test]
fn fake_audio_covers_every_speaker_content_request() {
    let mut cfg = tiny();
    cfg.dataset.n_speakers = 10;
    let corpus = build_corpus(&cfg.dataset, &cfg.features).unwrap();
    let split = split_corpus(&corpus, cfg.train_contents).unwrap();
    let g = recon_generator(&cfg, &split, 0, 2).unwrap().generator;
    let clf = SpeakerClassifier::new(cfg.features.n_mels, Default::default(), &[4], 10, 0).unwrap();
    let requests: Vec<_> = (0..10).flat_map(|s| (0..50).map(move |c| (c, s))).collect();
    let dir = tempfile::tempdir().unwrap();
    let out = generate_fake_audio(&g, &clf, &requests, cfg.content_seed(), dir.path()).unwrap();
    assert_eq!(out.paths.len(), 500);
    assert_eq!(out.report.n_total, 500);
    assert!(generate_fake_audio(&g, &clf, &[(0, 10)], 0, dir.path()).is_err());
}
