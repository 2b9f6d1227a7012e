use flipkit_core::corpus::{Corpus, TaskId};
use flipkit_core::embed::{encode_corpus, EmbeddingTable, EncoderConfig, Pooling};
use flipkit_core::erc_net::gold_labels;
use flipkit_core::runner::{predict_efr, predict_erc, train_efr, train_erc, TrainConfig};
use flipkit_core::synthetic::{flip_corpus, recognition_corpus, SyntheticSpec};

fn stub_table(corpus: &Corpus, dim: usize) -> EmbeddingTable {
    let dir = tempfile::tempdir().unwrap();
    encode_corpus(corpus, &EncoderConfig::stub(dim, Pooling::ProviderNative, 3), &dir.path().join("e.bin")).unwrap()
}

#[test]
fn recognition_model_memorizes_twenty_dialogues() {
    let corpus = recognition_corpus(&SyntheticSpec {
        conversations: 20,
        ..SyntheticSpec::default()
    });
    let table = stub_table(&corpus, 16);
    let mut cfg = TrainConfig::for_task(TaskId::RECOGNITION);
    cfg.epochs = 200;
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 4;
    cfg.val_fraction = 0.0;
    cfg.erc.hidden_dim = 24;
    cfg.erc.dropout = 0.0;
    let outcome = train_erc(&corpus, &table, &cfg).unwrap();
    let block_means: Vec<f64> = outcome
        .log
        .chunks(20)
        .map(|c| c.iter().map(|r| r.train_loss).sum::<f64>() / c.len() as f64)
        .collect();
    for pair in block_means.windows(2) {
        assert!(pair[1] <= pair[0], "smoothed loss went up: {block_means:?}");
    }
    let predicted = predict_erc(&outcome.checkpoint, &corpus, &table).unwrap();
    let (mut correct, mut total) = (0, 0);
    for (d, p) in corpus.dialogues.iter().zip(&predicted) {
        let gold = gold_labels(d, &corpus.label_set).unwrap();
        for (g, label) in gold.iter().zip(p) {
            total += 1;
            correct += usize::from(&corpus.label_set[*g] == label);
        }
    }
    let accuracy = correct as f64 / total as f64;
    eprintln!("accuracy {accuracy:.4} best epoch {}", outcome.checkpoint.header.best_epoch);
    assert!(accuracy >= 0.95, "training accuracy {accuracy}");
}

#[test]
fn trigger_model_memorizes_fifty_instances() {
    let mut corpus = flip_corpus(&SyntheticSpec {
        conversations: 60,
        ..SyntheticSpec::default()
    }, TaskId::FLIP_ENGLISH);
    corpus.dialogues.truncate(50);
    assert_eq!(corpus.dialogues.len(), 50);
    let table = stub_table(&corpus, 16);
    let mut cfg = TrainConfig::for_task(TaskId::FLIP_ENGLISH);
    cfg.epochs = 300;
    cfg.learning_rate = 3e-3;
    cfg.batch_size = 10;
    cfg.val_fraction = 0.0;
    cfg.efr.model_dim = 32;
    cfg.efr.heads = 4;
    cfg.efr.ff_dim = 64;
    cfg.efr.history_dim = 8;
    cfg.efr.dropout = 0.0;
    let outcome = train_efr(&corpus, &table, &cfg).unwrap();
    let pred = predict_efr(&outcome.checkpoint, &corpus, &table, false).unwrap();
    let (mut correct, mut total) = (0, 0);
    for (d, p) in corpus.dialogues.iter().zip(&pred.decisions) {
        let gold = d.triggers.as_ref().unwrap();
        let start = d.len().saturating_sub(cfg.efr.window);
        for j in start..d.len() {
            total += 1;
            correct += usize::from(gold[j] == p[j]);
        }
    }
    let accuracy = correct as f64 / total as f64;
    eprintln!("accuracy {accuracy:.4} best epoch {}", outcome.checkpoint.header.best_epoch);
    assert!(accuracy >= 0.95, "per-position accuracy {accuracy}");
}
