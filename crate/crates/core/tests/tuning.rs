mod common;

use std::collections::BTreeSet;

use common::{model, small_data, tiny_backbone};
use promptcode::backbone::{FreezePolicy, MaskedLanguageModel};
use promptcode::corpus::{DatasetSplit, Label};
use promptcode::tuning::{
    few_shot_continue, train, zero_shot_apply, Checkpoint, LrSchedule, TrainConfig, TrainableSet,
};
use promptcode::verbalizer::VerbalizerSpec;
use promptcode::Error;

fn split() -> DatasetSplit {
    small_data().dialect_a
}

fn quick(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        peak_lr: lr,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn sets(list: &[TrainableSet]) -> BTreeSet<TrainableSet> {
    list.iter().copied().collect()
}

#[test]
fn schedule_examples() {
    let s = LrSchedule::new(100, 1000, 3e-5).unwrap();
    assert_eq!(s.lr_at(0).unwrap(), 0.0);
    assert_eq!(s.lr_at(100).unwrap(), 3e-5);
    assert!((s.lr_at(550).unwrap() - 1.5e-5).abs() < 1e-18);
    assert_eq!(s.lr_at(1000).unwrap(), 0.0);
    assert!(s.lr_at(1001).is_err());
    assert!(LrSchedule::new(0, 10, 1e-3).is_err());
    assert!(LrSchedule::new(11, 10, 1e-3).is_err());
}

#[test]
fn only_trainable_sets_change() {
    let data = split();
    let backbone = tiny_backbone(&small_data(), 2);
    for trainable in [
        sets(&[TrainableSet::PromptTable]),
        sets(&[TrainableSet::MlmHead]),
        sets(&[TrainableSet::PromptTable, TrainableSet::MlmHead]),
    ] {
        let mut m = model(&backbone, 4);
        let before = m.hashes();
        let cfg = TrainConfig {
            trainable_sets: trainable.clone(),
            ..quick(1, 1e-2)
        };
        train(&mut m, &data, &cfg).unwrap();
        let after = m.hashes();
        assert_eq!(before.encoder, after.encoder);
        assert_eq!(before.word_embeddings, after.word_embeddings);
        assert_eq!(
            before.prompt_table != after.prompt_table,
            trainable.contains(&TrainableSet::PromptTable)
        );
        assert_eq!(
            before.mlm_head != after.mlm_head,
            trainable.contains(&TrainableSet::MlmHead)
        );
    }
}

#[test]
fn full_finetune_moves_the_backbone() {
    let data = split();
    let backbone = tiny_backbone(&small_data(), 2);
    let mut m = model(&backbone, 4);
    let before = m.hashes();
    let cfg = TrainConfig {
        freeze_policy: FreezePolicy::FullFinetune,
        trainable_sets: sets(&[
            TrainableSet::PromptTable,
            TrainableSet::MlmHead,
            TrainableSet::Backbone,
        ]),
        ..quick(1, 1e-2)
    };
    let out = train(&mut m, &data, &cfg).unwrap();
    assert_ne!(before.encoder, m.hashes().encoder);
    assert!(out.best.body.is_some());
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = split();
    let backbone = tiny_backbone(&small_data(), 2);
    let mut m = model(&backbone, 4);
    let before = m.parameter_hash();
    let out = train(&mut m, &data, &quick(1, 0.0)).unwrap();
    assert_eq!(m.parameter_hash(), before);
    assert_eq!(out.history[0].val_accuracy, out.initial_val_accuracy);
}

#[test]
fn history_and_checkpoint_selection() {
    let data = split();
    let backbone = tiny_backbone(&small_data(), 2);
    let mut m = model(&backbone, 4);
    let out = train(&mut m, &data, &quick(4, 1e-2)).unwrap();
    assert_eq!(out.history.len(), 4);
    let best = out
        .history
        .iter()
        .map(|h| h.val_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let first_best = out
        .history
        .iter()
        .find(|h| h.val_accuracy == best)
        .unwrap()
        .epoch;
    assert_eq!(out.best.epoch, first_best);
    assert_eq!(out.best.validation_accuracy, best);
    assert_eq!(out.history.last().unwrap().lr_last, 0.0);
    // the restored model reproduces the stored validation accuracy
    let preds = zero_shot_apply(&m, &data.validation).unwrap();
    let hits = preds
        .iter()
        .zip(&data.validation)
        .filter(|(p, e)| p.label == e.label)
        .count();
    assert_eq!(hits as f64 / data.validation.len() as f64, best);
}

#[test]
fn identical_runs_are_bit_identical() {
    let data = split();
    let backbone = tiny_backbone(&small_data(), 2);
    let run = || {
        let mut m = model(&backbone, 4);
        let out = train(&mut m, &data, &quick(2, 1e-2)).unwrap();
        (out.history, out.best.hash())
    };
    assert_eq!(run(), run());
}

#[test]
fn label_swap_gives_identical_losses() {
    let data = split();
    let backbone = tiny_backbone(&small_data(), 2);
    let mut plain = model(&backbone, 4);
    let a = train(&mut plain, &data, &quick(2, 1e-2)).unwrap();

    let flip = |v: &[promptcode::corpus::TaskExample]| {
        v.iter()
            .map(|e| {
                let mut e = e.clone();
                e.label = e.label.flipped();
                e
            })
            .collect::<Vec<_>>()
    };
    let swapped_data = DatasetSplit {
        train: flip(&data.train),
        validation: flip(&data.validation),
        test: flip(&data.test),
        ..data.clone()
    };
    let mut swapped = model(&backbone, 4);
    swapped.verbalizer = VerbalizerSpec::default()
        .swapped()
        .resolve(backbone.tokenizer())
        .unwrap();
    let b = train(&mut swapped, &swapped_data, &quick(2, 1e-2)).unwrap();
    let losses =
        |h: &[promptcode::tuning::EpochRecord]| h.iter().map(|r| r.train_loss).collect::<Vec<_>>();
    assert_eq!(losses(&a.history), losses(&b.history));
}

#[test]
fn zero_shot_does_not_mutate() {
    let data = small_data();
    let backbone = tiny_backbone(&data, 2);
    let m = model(&backbone, 4);
    let before = m.parameter_hash();
    let preds = zero_shot_apply(&m, &data.dialect_b.test).unwrap();
    assert_eq!(preds.len(), data.dialect_b.test.len());
    assert_eq!(m.parameter_hash(), before);
    for p in preds {
        assert!((0.5..=1.0).contains(&p.score));
    }
}

#[test]
fn few_shot_continuation_contract() {
    let data = small_data();
    let backbone = tiny_backbone(&data, 2);
    let mut m = model(&backbone, 4);
    train(&mut m, &data.dialect_a, &quick(1, 1e-2)).unwrap();
    let err = few_shot_continue(&mut m, &[], &data.dialect_b.validation, &quick(1, 1e-2));
    assert!(matches!(err, Err(Error::Data(_))));

    let before = m.parameter_hash();
    few_shot_continue(
        &mut m,
        &data.dialect_b.train[..6],
        &data.dialect_b.validation,
        &quick(1, 0.0),
    )
    .unwrap();
    assert_eq!(m.parameter_hash(), before);
}

#[test]
fn missing_validation_is_named() {
    let backbone = tiny_backbone(&small_data(), 2);
    let mut m = model(&backbone, 2);
    let mut data = split();
    data.validation.clear();
    match train(&mut m, &data, &quick(1, 1e-2)) {
        Err(Error::MissingSplit(name)) => assert!(name.contains("validation")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip() {
    let data = split();
    let backbone = tiny_backbone(&small_data(), 2);
    let mut m = model(&backbone, 3);
    let out = train(&mut m, &data, &quick(1, 1e-2)).unwrap();
    let dir = std::env::temp_dir().join(format!("pc-ck-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("ck.bin");
    out.best.save(&path).unwrap();
    let fresh = model(&backbone, 3);
    let loaded = Checkpoint::load(&path, &fresh).unwrap();
    assert_eq!(loaded, out.best);
    let mut restored = fresh.clone();
    loaded.restore(&mut restored).unwrap();
    assert_eq!(restored.parameter_hash(), m.parameter_hash());
    let wrong = model(&backbone, 5);
    assert!(Checkpoint::load(&path, &wrong).is_err());
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn gold_ids_come_from_verbalizer() {
    let backbone = tiny_backbone(&small_data(), 2);
    let m = model(&backbone, 0);
    let yes = backbone.tokenizer().id_of("yes").unwrap();
    assert_eq!(m.verbalizer.gold_id(Label::Positive), yes);
}
