use qedlm_core::control::{self, GuidanceConfig};
use qedlm_core::corpus::toy_corpus;
use qedlm_core::eval::{eval_ctrl, mbr_select, SampleSet};
use qedlm_core::training::{train, TrainConfig};
use qedlm_core::{Configurable, ControlTarget, DenoiserConfig, ModelArtifact, Tensor, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> TrainConfig {
    TrainConfig {
        model: DenoiserConfig { emb_dim: 8, width: 16, layers: 1, heads: 2, ff: 32, seq_len: 16, steps: 30 },
        quant: "Q0i.8f".parse().unwrap(),
        iterations: 30,
        batch_size: 8,
        lr: 1e-3,
        report_every: 10,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions_and_samples() {
    let (lines, _) = toy_corpus(120, &mut ChaCha8Rng::seed_from_u64(8));
    let vocab = Vocabulary::from_corpus(lines.iter().map(String::as_str));
    let cfg = tiny();
    let trained = train(&cfg, &lines, &vocab).unwrap();
    let iters: Vec<usize> = trained.report.rows.iter().map(|r| r.iteration).collect();
    assert_eq!(iters, [0, 10, 20, 30]);
    assert!(trained.report.rows.iter().all(|r| r.train_loss.is_finite() && r.eval_mse.is_finite()));

    let art = ModelArtifact::from_trained(trained, vocab, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.qedf");
    art.save(&path).unwrap();
    let loaded = ModelArtifact::load(&path).unwrap();
    assert_eq!(loaded.table.quant.to_string(), "Q0i.8f");
    assert_eq!(loaded.train_config().unwrap().render(), cfg.render());

    let x = Tensor::randn(&[16, 8], &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(art.model.predict(&x, 12).unwrap(), loaded.model.predict(&x, 12).unwrap());
    assert_eq!(art.table.effective(), loaded.table.effective());

    let sched = loaded.schedule().unwrap();
    let g = GuidanceConfig { sample_steps: 10, ..GuidanceConfig::default() };
    let target = ControlTarget::length(6).unwrap();
    let draw = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = control::sample_controlled(&loaded.model, &loaded.table, &sched, &target, None, &g, &mut rng).unwrap();
        loaded.vocab.render_sample(&ids)
    };
    let samples: Vec<String> = (0..6).map(draw).collect();
    assert_eq!(samples, (0..6).map(draw).collect::<Vec<_>>());
    assert!(samples.iter().all(|s| s.starts_with("START") && !s.contains("PAD")));

    let set = SampleSet::from_lines(samples).unwrap();
    assert!(mbr_select(&set).unwrap() < set.len());
    let rate = eval_ctrl(&set, &target).unwrap();
    assert!((0.0..=1.0).contains(&rate));
}
