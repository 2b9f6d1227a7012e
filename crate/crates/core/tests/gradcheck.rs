//! Analytic gradients of both models against central finite differences in
//! f64, at dimensions small enough to perturb every parameter.

use flipkit_core::efr_net::{EfrConfig, EfrInput, EfrModel};
use flipkit_core::erc_net::{AttentionValues, ErcConfig, ErcInput, ErcModel, SpeakerFeedback};
use flipkit_core::nn::gradcheck::check;
use flipkit_core::nn::{ParamStore, Tape};
use flipkit_core::ptz::PtzRange;
use flipkit_core::runner::weighted_ce_loss;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
// Gradients below this magnitude are compared on an absolute scale.
const FLOOR: f64 = 1e-6;
const TOLERANCE: f64 = 1e-4;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn erc_case(cfg: ErcConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speakers = ["A", "B", "A", "C", "B"];
    let input = ErcInput {
        features: random(speakers.len(), cfg.input_dim(), &mut rng),
        speakers: speakers.iter().map(|s| s.to_string()).collect(),
    };
    let gold: Vec<usize> = (0..speakers.len()).map(|i| i % cfg.num_classes).collect();
    let weights: Vec<f64> = (0..cfg.num_classes).map(|k| 0.5 + k as f64).collect();
    let model = ErcModel::new(cfg.clone(), seed).unwrap();

    let loss_with = |store: &ParamStore| -> f64 {
        let m = ErcModel::with_params(cfg.clone(), store).unwrap();
        let mut tape = Tape::new(&m.store);
        let logits = m.forward(&mut tape, &input, None, None).unwrap();
        let loss = weighted_ce_loss(&mut tape, logits, &gold, &weights).unwrap();
        tape.value(loss)[[0, 0]]
    };
    let mut tape = Tape::new(&model.store);
    let logits = model.forward(&mut tape, &input, None, None).unwrap();
    let loss = weighted_ce_loss(&mut tape, logits, &gold, &weights).unwrap();
    let grads = tape.backward(loss);
    let report = check(&model.store, &grads, STEP, FLOOR, loss_with);
    eprintln!("{report:?}");
    assert!(report.checked == model.store.num_scalars());
    assert!(report.max_relative_error <= TOLERANCE, "{report:?}");
}

fn tiny_erc() -> ErcConfig {
    let mut cfg = ErcConfig::new(3, 2, 3);
    cfg.hidden_dim = 4;
    cfg.dropout = 0.0;
    cfg
}

#[test]
fn recognition_model_gradients() {
    erc_case(tiny_erc(), 1);
}

#[test]
fn recognition_model_gradients_other_variants() {
    let mut cfg = tiny_erc();
    cfg.hops = 1;
    cfg.attention_values = AttentionValues::Query;
    cfg.speaker_feedback = SpeakerFeedback::SameSpeaker;
    erc_case(cfg, 2);
}

#[test]
fn trigger_model_gradients() {
    let mut cfg = EfrConfig::new(3, 2, 3);
    cfg.model_dim = 4;
    cfg.heads = 2;
    cfg.ff_dim = 6;
    cfg.history_dim = 3;
    cfg.dropout = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let len = 4;
    let input = EfrInput {
        features: random(len, cfg.input_dim(), &mut rng),
        history: Array2::from_shape_fn((6, 3), |(r, c)| f64::from(u8::from(r % 3 == c))),
        zone: PtzRange { start: 0, end: len - 1 },
        window_offset: 0,
    };
    let gold = [0usize, 1, 1, 0];
    let weights = [0.4, 1.6];
    let model = EfrModel::new(cfg.clone(), 4).unwrap();
    let loss_with = |store: &ParamStore| -> f64 {
        let m = EfrModel::with_params(cfg.clone(), store).unwrap();
        let mut tape = Tape::new(&m.store);
        let out = m.forward(&mut tape, &input, None).unwrap();
        let loss = weighted_ce_loss(&mut tape, out.logits, &gold, &weights).unwrap();
        tape.value(loss)[[0, 0]]
    };
    let mut tape = Tape::new(&model.store);
    let out = model.forward(&mut tape, &input, None).unwrap();
    let loss = weighted_ce_loss(&mut tape, out.logits, &gold, &weights).unwrap();
    let grads = tape.backward(loss);
    let report = check(&model.store, &grads, STEP, FLOOR, loss_with);
    eprintln!("{report:?}");
    assert!(report.checked == model.store.num_scalars());
    assert!(report.max_relative_error <= TOLERANCE, "{report:?}");
}
