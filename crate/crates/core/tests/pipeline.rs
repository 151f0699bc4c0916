use std::io::BufReader;

use tlsrec::checkpoint::{check_compatible, read_checkpoint, write_checkpoint};
use tlsrec::dataset::{build_dataset, read_instances, write_instances, DatasetSplit};
use tlsrec::evaluation::{evaluate, EvalOptions};
use tlsrec::model::{Model, ModelConfig, Variant};
use tlsrec::synthetic::{memorization_csv, memorization_ingest, parse_csv};
use tlsrec::training::{parameter_norm, train, TrainConfig};

fn split() -> DatasetSplit {
    let log = parse_csv(&memorization_csv(12)).unwrap();
    build_dataset(&log, &memorization_ingest(3)).unwrap().0
}

fn model_config(split: &DatasetSplit, variant: Variant) -> ModelConfig {
    ModelConfig {
        dim: 8,
        heads: 2,
        sessions: split.sessions_per_instance,
        session_len: split.max_session_length,
        lag_buckets: split.lag_buckets,
        blocks: 1,
        dropout: 0.0,
        variant,
        norm_epsilon: 1e-5,
    }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        batch_size: 8,
        epochs,
        lambda_reg: 0.0,
        seed: 11,
        early_stop_patience: 1000,
        validation_k: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn instances_round_trip_through_text() {
    let split = split();
    let mut buf = Vec::new();
    write_instances(&split, &mut buf).unwrap();
    let back = read_instances(BufReader::new(buf.as_slice())).unwrap();
    assert_eq!(back, split);
    let mut again = Vec::new();
    write_instances(&back, &mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn train_checkpoint_evaluate() {
    let split = split();
    let outcome = train(&split, &model_config(&split, Variant::Full), &quick(6)).unwrap();
    assert_eq!(outcome.log.len(), 6);
    assert!(outcome.best_epoch >= 1 && outcome.best_epoch <= 6);

    let mut bytes = Vec::new();
    write_checkpoint(&outcome.model, &mut bytes).unwrap();
    let restored = read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(restored, outcome.model);
    check_compatible(&restored, &split).unwrap();

    let before = restored.params().clone();
    let opts = EvalOptions::default();
    let a = evaluate(&restored, &split.test, &opts).unwrap();
    let b = evaluate(&restored, &split.test, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(restored.params(), &before);
    assert_eq!(a.instances, split.test.len());
    assert_eq!(a.rows.len(), 2);
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let split = split();
    let config = model_config(&split, Variant::GateAverage);
    let outcome = train(&split, &config, &quick(0)).unwrap();
    assert!(outcome.log.is_empty());
    let fresh = Model::new(config, split.user_count(), split.item_count(), quick(0).seed).unwrap();
    assert_eq!(outcome.model.params(), fresh.params());
}

#[test]
fn strong_regularization_shrinks_parameters() {
    let split = split();
    let config = model_config(&split, Variant::Full);
    let init = Model::new(config.clone(), split.user_count(), split.item_count(), 11).unwrap();
    let heavy = TrainConfig {
        lambda_reg: 1e3,
        ..quick(5)
    };
    let light = train(&split, &config, &quick(5)).unwrap();
    let shrunk = train(&split, &config, &heavy).unwrap();
    let n0 = parameter_norm(init.params());
    assert!(parameter_norm(shrunk.model.params()) < n0);
    assert!(parameter_norm(shrunk.model.params()) < parameter_norm(light.model.params()));
}

#[test]
fn memorization_loss_mostly_decreases() {
    let split = split();
    let outcome = train(&split, &model_config(&split, Variant::Full), &quick(6)).unwrap();
    let losses: Vec<f64> = outcome.log.iter().map(|r| r.train_loss).collect();
    let down = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down >= 4, "{losses:?}");
}

#[test]
fn training_is_reproducible() {
    let split = split();
    let config = model_config(&split, Variant::GateMultiHead);
    let a = train(&split, &config, &quick(3)).unwrap();
    let b = train(&split, &config, &quick(3)).unwrap();
    assert_eq!(a.model, b.model);
    let strip =
        |o: &tlsrec::training::TrainOutcome| o.log.iter().map(|r| (r.train_loss, r.val_hit)).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn checkpoint_rejects_foreign_split() {
    let split = split();
    let model = Model::new(
        model_config(&split, Variant::Full),
        split.user_count() + 1,
        split.item_count(),
        1,
    )
    .unwrap();
    let err = check_compatible(&model, &split).unwrap_err();
    assert_eq!(err.class(), "contract");
}
