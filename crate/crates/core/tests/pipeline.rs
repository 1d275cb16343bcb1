use damsdan::data::{generate_synth, make_protocol, ProtocolKind, SynthSpec};
use damsdan::model::Damsdan;
use damsdan::trainer::{evaluate, run_protocol, TrainConfig};

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        num_domains: 3,
        samples_per_class_per_domain: 20,
        feature_dim: 8,
        ..SynthSpec::benchmark(seed)
    }
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 6,
        batch_size: 32,
        ..TrainConfig::default()
    }
}

#[test]
fn trained_checkpoint_reloads_with_identical_predictions() {
    let data = generate_synth(&small_spec(1)).unwrap();
    let plan = make_protocol(&data, ProtocolKind::Holdout).unwrap();
    let (report, folds) = run_protocol(&data, &plan, &small_cfg()).unwrap();
    let fold = &folds[0];
    assert_eq!(fold.trace.loss_history.len(), 6);
    assert_eq!(fold.trace.weight_history.last().unwrap().final_weights.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    fold.model.save(&path).unwrap();
    let back = Damsdan::load(&path).unwrap();
    let target = data.iter().find(|d| d.key == plan.folds[0].target).unwrap();
    let a = evaluate(&fold.model, target).unwrap();
    let b = evaluate(&back, target).unwrap();
    assert_eq!(a.probabilities.data(), b.probabilities.data());
    assert_eq!(Some(b.accuracy.unwrap()), report.folds[0].accuracy);
}

#[test]
fn source_weights_are_a_distribution_every_epoch() {
    let data = generate_synth(&small_spec(2)).unwrap();
    let plan = make_protocol(&data, ProtocolKind::Holdout).unwrap();
    let (_, folds) = run_protocol(&data, &plan, &small_cfg()).unwrap();
    for w in &folds[0].trace.weight_history {
        let sum: f64 = w.final_weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(w.final_weights.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn loso_runs_every_fold() {
    let data = generate_synth(&SynthSpec {
        num_domains: 4,
        ..small_spec(3)
    })
    .unwrap();
    let plan = make_protocol(&data, ProtocolKind::CrossSubjectLoso).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..small_cfg()
    };
    let (report, _) = run_protocol(&data, &plan, &cfg).unwrap();
    assert_eq!(report.folds.len(), 4);
    let mean = report.accuracies.iter().sum::<f64>() / 4.0;
    assert!((report.mean_accuracy.unwrap() - mean).abs() < 1e-12);
}
