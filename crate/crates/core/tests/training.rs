use proptest::prelude::*;
use tim4rec::data::{build_sequences, make_batch, synthetic, Example, Split, Width};
use tim4rec::eval::{evaluate, rank_examples, rank_of_target, RankingReport};
use tim4rec::model::{Model, ModelConfig, EMBEDDING};
use tim4rec::trainer::{tiny_config, train, train_on, TrainConfig};

fn small_synthetic(users: usize, seed: u64) -> tim4rec::data::SequenceDataset {
    build_sequences(&synthetic::generate(&synthetic::SyntheticConfig {
        users,
        seed,
        ..Default::default()
    }))
    .unwrap()
}

fn model_for(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab,
        d_model: 16,
        state_size: 8,
        heads: 2,
        max_len: 30,
        dropout: 0.1,
        chunk: 8,
        ..ModelConfig::default()
    }
}

#[test]
fn loss_halves_on_synthetic_data() {
    let ds = small_synthetic(200, 21);
    let tc = TrainConfig {
        max_epochs: 8,
        patience: 8,
        seed: 21,
        ..TrainConfig::default()
    };
    let out = train(Model::new(model_for(ds.vocab()), 21).unwrap(), &ds, &tc).unwrap();
    let last = out.history.records.last().unwrap().loss;
    assert!(last < 0.5 * out.initial_loss, "{last} vs {}", out.initial_loss);
    assert!(out.diverged.is_none());
}

#[test]
fn patience_zero_runs_one_epoch() {
    let ds = small_synthetic(20, 1);
    let tc = TrainConfig {
        patience: 0,
        ..TrainConfig::default()
    };
    let out = train(Model::new(model_for(ds.vocab()), 1).unwrap(), &ds, &tc).unwrap();
    assert_eq!(out.history.records.len(), 1);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn pad_row_stays_zero() {
    let ds = small_synthetic(20, 2);
    let tc = TrainConfig {
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let out = train(Model::new(model_for(ds.vocab()), 2).unwrap(), &ds, &tc).unwrap();
    let e = out.model.params.get(EMBEDDING).unwrap();
    assert!(e.row(0).iter().all(|&v| v == 0.0));
}

#[test]
fn empty_inputs_rejected() {
    let model = Model::new(tiny_config(), 0).unwrap();
    assert!(train_on(model, &[], &[], &TrainConfig::default()).is_err());
    let bad = TrainConfig {
        lr: -1.0,
        ..TrainConfig::default()
    };
    let ds = small_synthetic(5, 0);
    let model = Model::new(model_for(ds.vocab()), 0).unwrap();
    assert!(train(model, &ds, &bad).is_err());
}

#[test]
fn ranks_follow_logits() {
    let ds = small_synthetic(30, 5);
    let model = Model::new(model_for(ds.vocab()), 5).unwrap();
    let test = ds.eval_examples(Split::Test);
    let ranks = rank_examples(&model, &test, 7, false).unwrap();
    for (ex, &r) in test.iter().zip(&ranks) {
        let b = make_batch(&[ex], 30, Width::Full).unwrap();
        let logits = model.eval_logits(&b).unwrap();
        assert_eq!(rank_of_target(logits.row(0), ex.target).unwrap(), r);
    }
    let report = evaluate(&model, &test, 256, false).unwrap();
    assert_eq!(report, RankingReport::from_ranks(&ranks, &[10, 20, 50]).unwrap());
}

#[test]
fn masking_seen_items_only_improves_ranks() {
    let ds = small_synthetic(30, 6);
    let model = Model::new(model_for(ds.vocab()), 6).unwrap();
    let test = ds.eval_examples(Split::Test);
    let plain = rank_examples(&model, &test, 64, false).unwrap();
    let masked = rank_examples(&model, &test, 64, true).unwrap();
    assert!(plain.iter().zip(&masked).all(|(p, m)| m <= p));
}

#[test]
fn evaluation_ignores_batch_size() {
    let ds = small_synthetic(25, 8);
    let model = Model::new(model_for(ds.vocab()), 8).unwrap();
    let test = ds.eval_examples(Split::Test);
    let a = rank_examples(&model, &test, 1, false).unwrap();
    let b = rank_examples(&model, &test, 256, false).unwrap();
    assert_eq!(a, b);
}

fn sort_rank(scores: &[f64], target: usize) -> usize {
    let mut others: Vec<f64> = (1..scores.len()).filter(|&i| i != target).map(|i| scores[i]).collect();
    others.sort_by(|a, b| b.total_cmp(a));
    others.iter().take_while(|&&v| v >= scores[target]).count() + 1
}

proptest! {
    #[test]
    fn rank_matches_sort(scores in prop::collection::vec(-3i32..3, 2..40), pick in 0usize..1000) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let target = 1 + pick % (scores.len() - 1);
        prop_assert_eq!(rank_of_target(&scores, target).unwrap(), sort_rank(&scores, target));
    }
}

#[test]
fn eval_examples_never_see_their_target() {
    let ds = small_synthetic(10, 9);
    let test: Vec<Example> = ds.eval_examples(Split::Test);
    for (u, ex) in ds.users.iter().zip(&test) {
        assert_eq!(ex.items.len() + 1, u.items.len());
    }
}
