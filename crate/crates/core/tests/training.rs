use flipkit_core::corpus::{Corpus, TaskId};
use flipkit_core::embed::{encode_corpus, EmbeddingTable, EncoderConfig, Pooling};
use flipkit_core::runner::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, predict_efr, predict_erc, save_checkpoint, train_efr,
    train_erc, TrainConfig,
};
use flipkit_core::synthetic::{flip_corpus, recognition_corpus, SyntheticSpec};
use flipkit_core::Error;

fn stub_table(corpus: &Corpus, dim: usize) -> EmbeddingTable {
    let dir = tempfile::tempdir().unwrap();
    encode_corpus(corpus, &EncoderConfig::stub(dim, Pooling::MeanTokens, 5), &dir.path().join("e.bin")).unwrap()
}

fn small_erc(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::for_task(TaskId::RECOGNITION);
    cfg.epochs = epochs;
    cfg.learning_rate = 5e-3;
    cfg.batch_size = 8;
    cfg.erc.hidden_dim = 8;
    cfg
}

fn small_efr(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::for_task(TaskId::FLIP_CODE_MIXED);
    cfg.epochs = epochs;
    cfg.learning_rate = 5e-3;
    cfg.batch_size = 16;
    cfg.efr.model_dim = 8;
    cfg.efr.heads = 2;
    cfg.efr.ff_dim = 16;
    cfg.efr.history_dim = 4;
    cfg
}

#[test]
fn recognition_training_is_deterministic_and_round_trips() {
    let corpus = recognition_corpus(&SyntheticSpec::default());
    let table = stub_table(&corpus, 8);
    let cfg = small_erc(6);
    let a = train_erc(&corpus, &table, &cfg).unwrap();
    let b = train_erc(&corpus, &table, &cfg).unwrap();
    let bytes = checkpoint_to_bytes(&a.checkpoint).unwrap();
    assert_eq!(bytes, checkpoint_to_bytes(&b.checkpoint).unwrap());

    let best = a.checkpoint.header.best_metric;
    assert_eq!(a.log.len(), 6);
    for record in &a.log {
        assert!(best >= record.val_metric.unwrap());
        assert!(record.train_loss.is_finite());
        assert_eq!(record.numeric_mode, "single_threaded");
    }
    assert_eq!(a.checkpoint.header.selected_on, "validation");
    assert_eq!(a.checkpoint.header.validation_episodes.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("erc.ckpt");
    save_checkpoint(&a.checkpoint, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(
        predict_erc(&loaded, &corpus, &table).unwrap(),
        predict_erc(&a.checkpoint, &corpus, &table).unwrap()
    );
    assert!(loaded.efr_model().is_err());
}

#[test]
fn trigger_training_is_deterministic_and_round_trips() {
    let corpus = flip_corpus(&SyntheticSpec::default(), TaskId::FLIP_CODE_MIXED);
    let table = stub_table(&corpus, 8);
    let mut cfg = small_efr(4);
    cfg.eval_every = 2;
    let a = train_efr(&corpus, &table, &cfg).unwrap();
    let b = train_efr(&corpus, &table, &cfg).unwrap();
    let bytes = checkpoint_to_bytes(&a.checkpoint).unwrap();
    assert_eq!(bytes, checkpoint_to_bytes(&b.checkpoint).unwrap());
    let validated: Vec<usize> = a.log.iter().filter(|r| r.val_metric.is_some()).map(|r| r.epoch).collect();
    assert_eq!(validated, vec![2, 4]);

    let loaded = checkpoint_from_bytes(&bytes).unwrap();
    let off = predict_efr(&loaded, &corpus, &table, false).unwrap();
    assert_eq!(off, predict_efr(&a.checkpoint, &corpus, &table, false).unwrap());
    let on = predict_efr(&loaded, &corpus, &table, true).unwrap();
    let positives = |p: &[Vec<u8>]| p.iter().flatten().filter(|&&x| x == 1).count() as u64;
    assert_eq!(positives(&off.decisions) - positives(&on.decisions), on.mask_count);
    for (d, p) in corpus.dialogues.iter().zip(&off.decisions) {
        assert_eq!(d.len(), p.len());
        let window_start = d.len().saturating_sub(cfg.efr.window);
        assert!(p[..window_start].iter().all(|&x| x == 0));
    }
}

#[test]
fn different_seeds_give_different_checkpoints() {
    let corpus = recognition_corpus(&SyntheticSpec::default());
    let table = stub_table(&corpus, 8);
    let mut cfg = small_erc(1);
    let a = train_erc(&corpus, &table, &cfg).unwrap();
    cfg.seed += 1;
    let b = train_erc(&corpus, &table, &cfg).unwrap();
    assert_ne!(a.checkpoint.params, b.checkpoint.params);
}

#[test]
fn missing_embeddings_abort_before_training() {
    let corpus = recognition_corpus(&SyntheticSpec::default());
    let mut partial = recognition_corpus(&SyntheticSpec::default());
    partial.dialogues.truncate(3);
    let table = stub_table(&partial, 8);
    match train_erc(&corpus, &table, &small_erc(1)) {
        Err(Error::MissingEmbeddings(keys)) => assert!(!keys.is_empty()),
        other => panic!("expected missing embeddings, got {other:?}"),
    }
}

#[test]
fn empty_validation_selects_on_training_data() {
    let corpus = recognition_corpus(&SyntheticSpec::default());
    let table = stub_table(&corpus, 8);
    let mut cfg = small_erc(2);
    cfg.val_fraction = 0.0;
    let out = train_erc(&corpus, &table, &cfg).unwrap();
    assert_eq!(out.checkpoint.header.selected_on, "training");
    assert!(out.checkpoint.header.validation_episodes.is_empty());
}

#[test]
fn zone_restricted_training_runs() {
    let corpus = flip_corpus(&SyntheticSpec::default(), TaskId::FLIP_ENGLISH);
    let table = stub_table(&corpus, 8);
    let mut cfg = small_efr(1);
    cfg.efr.restrict_to_ptz = true;
    cfg.efr.ptz_mask = true;
    let out = train_efr(&corpus, &table, &cfg).unwrap();
    let pred = predict_efr(&out.checkpoint, &corpus, &table, false).unwrap();
    assert_eq!(pred.decisions.len(), corpus.dialogues.len());
}
