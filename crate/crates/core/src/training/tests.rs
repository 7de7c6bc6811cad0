use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::Design;
use crate::numerics::gradient_check;

fn mini() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        short_len: 4,
        long_len: 8,
        stage1_tokens: 2,
        stage2_tokens: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        classes: 3,
        ff_width: 16,
        design: Design::TwoStage,
    }
}

fn random_sequence(rng: &mut ChaCha8Rng, len: usize, c: usize, classes: usize) -> LabeledSequence {
    let features = Matrix::from_fn(len, c, |_, _| rng.random_range(-1.0..1.0));
    let labels = (0..len).map(|_| rng.random_range(0..=classes)).collect();
    LabeledSequence::new(features, labels).unwrap()
}

#[test]
fn loss_of_perfect_and_uniform_predictions() {
    let labels = [0, 2, 1, 3, 3];
    let one_hot = Matrix::from_fn(5, 4, |r, c| if labels[r] == c { 1.0 } else { 0.0 });
    assert_eq!(sequence_loss(&Prediction::new(one_hot), &labels).unwrap(), 0.0);
    let uniform = Matrix::filled(5, 4, 0.25);
    let loss = sequence_loss(&Prediction::new(uniform), &labels).unwrap();
    assert!((loss - 5.0 * 4f64.ln()).abs() < 1e-9);
}

#[test]
fn loss_matches_scalar_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let raw = Matrix::from_fn(6, 5, |_, _| rng.random_range(0.0..1.0));
        let probs = Matrix::from_fn(6, 5, |r, c| raw.get(r, c) / raw.row(r).iter().sum::<f64>());
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
        let mut expected = 0.0;
        for (t, &y) in labels.iter().enumerate() {
            expected -= probs.get(t, y).max(1e-12).ln();
        }
        let got = sequence_loss(&Prediction::new(probs), &labels).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }
    let zero: Matrix = Matrix::zeros(1, 2);
    let floor = sequence_loss(&Prediction::new(zero), &[1]).unwrap();
    assert!((floor - 1e-12f64.ln().abs()).abs() < 1e-9);
}

#[test]
fn masked_position_equals_truncated_forward() {
    let params = ModelParams::init(&mini(), 3).unwrap();
    let model = params.inference::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let long = Matrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
    let short = Matrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
    let full = model.predict(&long, &short, true).unwrap();
    for t in 0..4 {
        let idx: Vec<usize> = (0..=t).collect();
        let truncated = model.predict(&long, &short.select_rows(&idx), true).unwrap();
        assert_eq!(truncated.newest(), full.position(t), "position {t}");
    }
}

#[test]
fn sequence_loss_gradient_check() {
    let params = ModelParams::init(&mini(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let long = Matrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
    let short = Matrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
    let labels = [0, 3, 1, 2];
    let mut inputs: Vec<Matrix> = params.store().iter().map(|(_, m)| m.clone()).collect();
    // Non-trivial biases and gains.
    for m in inputs.iter_mut().filter(|m| m.rows() == 1) {
        for v in m.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let report = gradient_check(
        |t, v| {
            t.set_param_vars(v.to_vec());
            let l = t.input(long.clone());
            let s = t.input(short.clone());
            let probs = params.layout().forward(t, &l, &s, true)?;
            t.nll(&probs, &labels)
        },
        &inputs,
        1,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
    assert!(report.entries_checked > params.param_count() / 2);
}

#[test]
fn config_validation() {
    TrainConfig::default().validate().unwrap();
    for bad in [
        TrainConfig {
            batch_size: 0,
            ..Default::default()
        },
        TrainConfig {
            epochs: 0,
            ..Default::default()
        },
        TrainConfig {
            peak_lr: 0.0,
            ..Default::default()
        },
        TrainConfig {
            warmup_fraction: 1.0,
            ..Default::default()
        },
        TrainConfig {
            warmup_fraction: 0.0,
            ..Default::default()
        },
        TrainConfig {
            weight_decay: -1.0,
            ..Default::default()
        },
        TrainConfig {
            windows_per_epoch: Some(0),
            ..Default::default()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs,
        peak_lr: 3e-3,
        weight_decay: 0.0,
        warmup_fraction: 0.2,
        seed: 9,
        windows_per_epoch: Some(16),
    }
}

#[test]
fn training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<_> = (0..3).map(|_| random_sequence(&mut rng, 20, 8, 3)).collect();
    let (a, ha) = fit(&data, &quick_config(2), &mini()).unwrap();
    let (b, hb) = fit(&data, &quick_config(2), &mini()).unwrap();
    assert_eq!(a.store(), b.store());
    assert_eq!(ha, hb);
    assert_eq!(ha.epochs.len(), 2);
    assert!(ha.to_tsv().starts_with("epoch\tloss"));
}

#[test]
fn bad_datasets_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(fit(&[], &quick_config(1), &mini()).is_err());
    let mut seq = random_sequence(&mut rng, 20, 8, 3);
    seq.labels[5] = 4;
    assert!(matches!(
        fit(&[seq], &quick_config(1), &mini()),
        Err(Error::LabelOutOfRange {
            step: 5,
            label: 4,
            max: 3
        })
    ));
    let short = random_sequence(&mut rng, 3, 8, 3);
    assert!(fit(&[short], &quick_config(1), &mini()).is_err());
    let wide = random_sequence(&mut rng, 10, 9, 3);
    assert!(fit(&[wide], &quick_config(1), &mini()).is_err());
    assert!(LabeledSequence::new(Matrix::zeros(3, 2), vec![0; 4]).is_err());
}

#[test]
fn divergence_returns_last_good_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data = vec![random_sequence(&mut rng, 20, 8, 3)];
    let cfg = TrainConfig {
        peak_lr: 1e200,
        epochs: 3,
        ..quick_config(3)
    };
    match fit(&data, &cfg, &mini()) {
        Err(Error::Diverged { last_good, .. }) => assert!(last_good.store().is_finite()),
        other => panic!("expected divergence, got {:?}", other.map(|(_, h)| h)),
    }
}

#[test]
fn full_pass_epoch_visits_every_window_end() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = vec![
        random_sequence(&mut rng, 9, 8, 3),
        random_sequence(&mut rng, 5, 8, 3),
    ];
    let cfg = TrainConfig {
        windows_per_epoch: None,
        ..quick_config(1)
    };
    let (_, h) = fit(&data, &cfg, &mini()).unwrap();
    // 6 + 2 window ends in total, split into batches of 4.
    assert_eq!(h.epochs.len(), 1);
    let acc = h.epochs[0].accuracy * 8.0;
    assert!((acc - acc.round()).abs() < 1e-9);
}

#[test]
fn accuracy_filter_and_stride() {
    let params = ModelParams::init(&mini(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = vec![random_sequence(&mut rng, 30, 8, 3)];
    let all = newest_frame_accuracy(&params, &data, 1, |_| true).unwrap();
    assert!((0.0..=1.0).contains(&all));
    newest_frame_accuracy(&params, &data, 4, |y| y != 0).unwrap();
    assert!(newest_frame_accuracy(&params, &data, 1, |y| y > 10).is_err());
}
