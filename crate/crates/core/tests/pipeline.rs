use re3qa_core::corpus::{filter_split, generate_synthetic, Split, SyntheticSpec};
use re3qa_core::encoder::{ModelConfig, ModelParams};
use re3qa_core::inference::{evaluate, Ablation, InferenceConfig, ScoreWeights};
use re3qa_core::preprocess::{prepare_all, PreparedInstance, PreprocessConfig, Vocabulary};
use re3qa_core::train::{train, TrainConfig};

fn small_task() -> (Vec<PreparedInstance>, Vec<PreparedInstance>, usize) {
    let spec = SyntheticSpec {
        num_instances: 30,
        dev_instances: 6,
        vocab_size: 160,
        ..SyntheticSpec::default()
    };
    let all = generate_synthetic(&spec).unwrap();
    let train_set = filter_split(&all, Split::Train);
    let dev_set = filter_split(&all, Split::Dev);
    let vocab = Vocabulary::build(&train_set);
    let pre = PreprocessConfig::default();
    (
        prepare_all(&train_set, &pre, &vocab).unwrap(),
        prepare_all(&dev_set, &pre, &vocab).unwrap(),
        vocab.len(),
    )
}

fn tiny_model(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        hidden: 8,
        layers: 2,
        heads: 2,
        max_seq_len: PreprocessConfig::default().max_seq_len,
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        retrieve_depth: 1,
        epochs: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn every_prepared_instance_has_a_positive_segment() {
    let (train_set, dev_set, _) = small_task();
    assert_eq!((train_set.len(), dev_set.len()), (24, 6));
    assert!(train_set.iter().chain(&dev_set).all(|p| p.has_positive()));
}

#[test]
fn training_is_reproducible_and_survives_a_round_trip() {
    let (train_set, dev_set, vocab) = small_task();
    let cfg = train_config();
    let run = || {
        let mut params = ModelParams::<f32>::init(tiny_model(vocab), 3, 0.02).unwrap();
        let log = train(&mut params, &train_set, &cfg, &mut ()).unwrap();
        (params, log)
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(log_a, log_b);
    assert!(log_a.iter().all(|r| r.losses.total().is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    a.save(&pa).unwrap();
    b.save(&pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());

    let loaded = ModelParams::<f32>::load(&pa).unwrap();
    let base = InferenceConfig::from_train(&cfg, ScoreWeights::default());
    let before = evaluate(&a, &dev_set, &base, Ablation::Full).unwrap();
    let after = evaluate(&loaded, &dev_set, &base, Ablation::Full).unwrap();
    assert_eq!(before.report, after.report);
    assert_eq!(before.predictions, after.predictions);
}

#[test]
fn ablations_report_bounded_metrics() {
    let (_, dev_set, vocab) = small_task();
    let params = ModelParams::<f32>::init(tiny_model(vocab), 5, 0.02).unwrap();
    let base = InferenceConfig::from_train(&train_config(), ScoreWeights::default());
    for ablation in Ablation::ALL {
        let eval = evaluate(&params, &dev_set, &base, ablation).unwrap();
        let r = &eval.report;
        assert_eq!(r.instances, dev_set.len());
        assert_eq!(eval.predictions.len(), dev_set.len());
        for v in [r.em, r.f1, r.map] {
            assert!((0.0..=1.0).contains(&v), "{ablation:?}: {v}");
        }
        assert!(r.em <= r.f1);
        assert!(r.top_n.windows(2).all(|w| w[0].rate <= w[1].rate));
    }
}
