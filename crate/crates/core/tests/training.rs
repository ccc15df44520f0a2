mod common;

use std::io::Cursor;

use common::{overfit_config, toy_examples, toy_items, train_p1};
use rignn::eval::{evaluate_model_top, metrics};
use rignn::ingest::Bundle;
use rignn::model::{ModelConfig, RiGnn};
use rignn::numcore::ParameterSet;
use rignn::synth::{generate, SynthSpec};
use rignn::train::{train, Prepared, TrainConfig};

#[test]
fn memorizes_toy_corpus() {
    let examples = toy_examples();
    let (model_cfg, cfg) = overfit_config();
    let p1 = train_p1(&examples, &toy_items(), model_cfg, &cfg);
    assert!(p1 >= 90.0, "train P@1 = {p1}");
}

fn small_data() -> (Bundle, Prepared, ModelConfig, TrainConfig) {
    let spec = SynthSpec {
        session_count: 120,
        num_topics: 3,
        items_per_topic: 8,
        ..SynthSpec::default()
    };
    let corpus = generate(&spec).unwrap();
    let topics = corpus.bundle.oracle_topics.clone().unwrap();
    let data = Prepared::new(&corpus.bundle, topics, 20, 0.1).unwrap();
    let (mut model, mut train) = overfit_config();
    model.dim = 8;
    model.max_len = 20;
    model.max_review_tokens = 20;
    model.dropout = 0.2;
    train.epochs = 3;
    train.batch_size = 20;
    (corpus.bundle, data, model, train)
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let (_, data, model_cfg, mut cfg) = small_data();
    cfg.epochs = 0;
    let mut model = RiGnn::<f64>::new(model_cfg, data.num_items(), data.vocab_size(), 5).unwrap();
    let before = model.params.clone();
    let outcome = train(&mut model, &data.train, &data.valid, &data.items, &cfg, |_| {
        panic!("no epochs")
    })
    .unwrap();
    assert!(outcome.log.is_empty());
    assert_eq!(outcome.best_epoch, 0);
    assert_eq!(outcome.best, before);
    assert_eq!(outcome.last, before);
    assert_eq!(outcome.initial, before);
}

#[test]
fn same_seed_gives_identical_logs_and_parameters() {
    let (_, data, model_cfg, cfg) = small_data();
    let run = || {
        let mut model = RiGnn::<f64>::new(model_cfg.clone(), data.num_items(), data.vocab_size(), cfg.seed).unwrap();
        let mut lines = Vec::new();
        let outcome = train(&mut model, &data.train, &data.valid, &data.items, &cfg, |r| {
            lines.push(serde_json::to_string(r).unwrap())
        })
        .unwrap();
        (lines, outcome.last)
    };
    let (log_a, params_a) = run();
    let (log_b, params_b) = run();
    assert_eq!(log_a.len(), 3);
    assert_eq!(log_a, log_b);
    assert_eq!(params_a, params_b);

    let mut other = cfg.clone();
    other.seed += 1;
    let mut model = RiGnn::<f64>::new(model_cfg.clone(), data.num_items(), data.vocab_size(), cfg.seed).unwrap();
    let outcome = train(&mut model, &data.train, &data.valid, &data.items, &other, |_| {}).unwrap();
    assert_ne!(outcome.last, params_a);
}

#[test]
fn checkpoint_round_trip_reproduces_metrics() {
    let (_, data, model_cfg, cfg) = small_data();
    let mut model = RiGnn::<f64>::new(model_cfg.clone(), data.num_items(), data.vocab_size(), cfg.seed).unwrap();
    let outcome = train(&mut model, &data.train, &data.valid, &data.items, &cfg, |_| {}).unwrap();
    let mut bytes = Vec::new();
    outcome.best.write_checkpoint(&mut bytes).unwrap();
    let restored = ParameterSet::<f64>::read_checkpoint(Cursor::new(&bytes)).unwrap();
    assert_eq!(restored, outcome.best);
    let mut again = Vec::new();
    restored.write_checkpoint(&mut again).unwrap();
    assert_eq!(again, bytes);

    let a = RiGnn::from_params(model_cfg.clone(), outcome.best).unwrap();
    let b = RiGnn::from_params(model_cfg, restored).unwrap();
    let ma = metrics(&evaluate_model_top(&a, &data.test, &data.items, 20).unwrap()).unwrap();
    let mb = metrics(&evaluate_model_top(&b, &data.test, &data.items, 20).unwrap()).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn bundle_round_trip_is_bit_exact() {
    let (bundle, ..) = small_data();
    let bytes = bundle.to_bytes().unwrap();
    let back = Bundle::from_bytes(&bytes).unwrap();
    assert_eq!(back, bundle);
    assert_eq!(back.to_bytes().unwrap(), bytes);
}
