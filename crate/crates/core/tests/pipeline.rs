//! End-to-end checks of the trainer on the default synthetic benchmark.

use milda::container;
use milda::metrics::{accuracy, decide};
use milda::model::{bag_predict, ModelBundle};
use milda::pseudo::MixRule;
use milda::synth::{build_experiment_data, DataConfig};
use milda::trainer::{run_step1, run_step3, Labeler, TrainConfig, TrainingData, TrainingHistory};
use milda::types::label_audit;
use milda::{validate_bag_consistency, LabelOrigin};

fn default_data() -> (milda::synth::ExperimentData, TrainingData) {
    let data = build_experiment_data(&DataConfig::default(), None).unwrap();
    let td = TrainingData::new(&data.source_train, &data.source_val, &data.target_train).unwrap();
    (data, td)
}

#[test]
fn default_datasets_are_consistent_and_round_trip() {
    let (data, _) = default_data();
    for ds in [&data.source_train, &data.source_val, &data.target_train, &data.target_test] {
        assert!(validate_bag_consistency(ds).is_empty());
        let bytes = container::encode(ds, &container::Provenance::default()).unwrap();
        let (back, meta) = container::decode(&bytes).unwrap();
        assert_eq!(&back, ds);
        assert_eq!(meta.n_bags, ds.n_bags());
    }
    let again = build_experiment_data(&DataConfig::default(), None).unwrap();
    assert_eq!(
        container::content_hash(&again.target_test).unwrap(),
        container::content_hash(&data.target_test).unwrap()
    );
}

#[test]
fn pretraining_learns_both_heads() {
    let (data, td) = default_data();
    let mut bag_acc = Vec::new();
    for seed in 0..3 {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let mut model = ModelBundle::init(&cfg.arch, seed).unwrap();
        let mut history = TrainingHistory::default();
        label_audit::reset();
        run_step1(&mut model, &td, &cfg, &mut history).unwrap();
        assert_eq!(label_audit::target_reads(), 0);
        assert_eq!(history.len(), cfg.epochs_step1);
        let val = history.records.last().unwrap().source_val_pr_auc.unwrap();
        assert!(val > 0.9, "seed {seed}: source validation PR-AUC {val}");

        let (mut preds, mut labels) = (Vec::new(), Vec::new());
        for bag in data.target_test.bags() {
            let x = milda::model::to_matrix(bag.instances().iter().map(|i| i.features()), td.dim);
            let feats = model.encoder.forward(x.view());
            preds.push(decide(bag_predict(&model.bag_head, feats.view()).unwrap()));
            labels.push(bag.label());
        }
        bag_acc.push(accuracy(&preds, &labels).unwrap());
    }
    let n = bag_acc.len() as f64;
    let mean = bag_acc.iter().sum::<f64>() / n;
    let sd = (bag_acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean > 0.5 + 3.0 * sd, "bag accuracy {bag_acc:?}");
    assert!(mean > 0.5);
}

#[test]
fn pseudo_labels_respect_bag_labels() {
    let (data, td) = default_data();
    let cfg = TrainConfig {
        epochs_step1: 10,
        ..TrainConfig::default()
    };
    let mut model = ModelBundle::init(&cfg.arch, 0).unwrap();
    run_step1(&mut model, &td, &cfg, &mut TrainingHistory::default()).unwrap();
    let schedule = cfg.schedule_for(td.n_tpi());
    let oracle: std::collections::BTreeMap<_, _> = data
        .target_train
        .bags()
        .iter()
        .flat_map(|b| b.instances().iter().map(move |i| (i.id(), (b.label(), i.oracle_label().unwrap()))))
        .collect();
    for epoch in [0, 10, 25] {
        let out = run_step3(&model, &td, &schedule, Labeler::Mix(MixRule::Confidence), epoch, 0).unwrap();
        assert!(out.positive <= schedule.a_p * out.tau);
        assert!(out.negative <= schedule.a_n * out.tau);
        for a in &out.assignments {
            let (bag_label, y) = oracle[&a.instance];
            match a.origin {
                LabelOrigin::NegativeBag => {
                    assert_eq!(bag_label, 0);
                    assert_eq!((a.label, y), (0, 0));
                }
                LabelOrigin::PositiveBag => assert_eq!(bag_label, 1),
            }
            if a.label == 1 {
                assert_eq!(a.origin, LabelOrigin::PositiveBag);
            }
        }
    }
}
