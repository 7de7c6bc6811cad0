use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::AttentionProjections;
use crate::numerics::Tape;

fn tiny(design: Design) -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        short_len: 4,
        long_len: 12,
        stage1_tokens: 3,
        stage2_tokens: 5,
        encoder_layers: 2,
        decoder_layers: 2,
        heads: 2,
        classes: 3,
        ff_width: 16,
        design,
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Perturbs every bias and norm parameter so none sits at its trivial value.
fn jitter(params: &mut ModelParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in params.store_mut().values_mut() {
        if m.rows() == 1 {
            for v in m.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
}

type Rows = Vec<Vec<f64>>;

/// Scalar reference implementation of one decoder unit.
struct Oracle<'a> {
    store: &'a ParamStore,
    heads: usize,
}

impl Oracle<'_> {
    fn m(&self, id: ParamId) -> &Matrix {
        self.store.get(id)
    }

    fn linear(&self, x: &Rows, w: ParamId, b: ParamId) -> Rows {
        let (w, b) = (self.m(w), self.m(b));
        x.iter()
            .map(|row| {
                (0..w.cols())
                    .map(|j| b.get(0, j) + (0..w.rows()).map(|i| row[i] * w.get(i, j)).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn attention(&self, q_in: &Rows, kv: &Rows, p: &AttentionProjections) -> Rows {
        let q = self.linear(q_in, p.wq, p.bq);
        let k = self.linear(kv, p.wk, p.bk);
        let v = self.linear(kv, p.wv, p.bv);
        let c = q[0].len();
        let hw = c / self.heads;
        let mut out = vec![vec![0.0; c]; q.len()];
        for h in 0..self.heads {
            let cols = h * hw..(h + 1) * hw;
            for (i, qi) in q.iter().enumerate() {
                let s: Vec<f64> = k
                    .iter()
                    .map(|kj| cols.clone().map(|d| qi[d] * kj[d]).sum::<f64>() / (hw as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in cols.clone() {
                    out[i][d] = e.iter().zip(&v).map(|(w, vj)| w / z * vj[d]).sum();
                }
            }
        }
        self.linear(&out, p.wo, p.bo)
    }

    fn add_norm(&self, x: &Rows, y: &Rows, norm: &crate::attention::Norm) -> Rows {
        let (g, b) = (self.m(norm.gain), self.m(norm.bias));
        x.iter()
            .zip(y)
            .map(|(a, c)| {
                let s: Vec<f64> = a.iter().zip(c).map(|(p, q)| p + q).collect();
                let n = s.len() as f64;
                let mean = s.iter().sum::<f64>() / n;
                let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                s.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g.get(0, j) + b.get(0, j))
                    .collect()
            })
            .collect()
    }

    fn unit(&self, out: &Rows, inp: &Rows, u: &DecoderUnitParams) -> Rows {
        let x = self.add_norm(out, &self.attention(out, out, &u.self_attn), &u.self_norm);
        let cross = u.cross.as_ref().unwrap();
        let x = self.add_norm(&x, &self.attention(&x, inp, &cross.attn), &cross.norm);
        let h: Rows = self
            .linear(&x, u.ff_in.w, u.ff_in.b)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        self.add_norm(&x, &self.linear(&h, u.ff_out.w, u.ff_out.b), &u.ff_norm)
    }
}

fn rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

#[test]
fn encoder_output_shape_is_fixed() {
    let params = ModelParams::init(&tiny(Design::TwoStage), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for len in [0, 1, 2048] {
        let long = random(&mut rng, len, 8);
        let out = encode_long_memory(&long, &params).unwrap();
        assert_eq!(out.shape(), (5, 8), "len {len}");
    }
    assert!(encode_long_memory(&Matrix::zeros(3, 7), &params).is_err());
}

#[test]
fn encoder_matches_scalar_oracle() {
    let mut params = ModelParams::init(&tiny(Design::TwoStage), 3).unwrap();
    jitter(&mut params, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let long = random(&mut rng, 12, 8);
    let got = encode_long_memory(&long, &params).unwrap();

    let layout = params.layout();
    let oracle = Oracle {
        store: params.store(),
        heads: 2,
    };
    let s1 = oracle.unit(
        &rows(params.store().get(layout.stage1_tokens.unwrap())),
        &rows(&long),
        layout.stage1_unit.as_ref().unwrap(),
    );
    let mut x = rows(params.store().get(layout.stage2_tokens.unwrap()));
    for u in &layout.stage2_units {
        x = oracle.unit(&x, &s1, u);
    }
    let expected = Matrix::from_rows(8, &x).unwrap();
    assert!(
        got.max_abs_diff(&expected) < 1e-10,
        "{}",
        got.max_abs_diff(&expected)
    );
}

#[test]
fn empty_long_memory_uses_stage1_tokens_as_null_memory() {
    let params = ModelParams::init(&tiny(Design::TwoStage), 6).unwrap();
    let model = params.inference::<f64>();
    let mut g = model.graph();
    let tokens = g.param(params.layout().stage1_tokens.unwrap());
    let expected = params.layout().stage2(&mut g, &tokens).unwrap();
    let got = encode_long_memory(&Matrix::zeros(0, 8), &params).unwrap();
    assert_eq!(&got, expected.as_ref());
}

#[test]
fn decoder_causality() {
    let params = ModelParams::init(&tiny(Design::TwoStage), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let encoded = random(&mut rng, 5, 8);
    let short = random(&mut rng, 4, 8);
    let base_c = decode_short_term(&encoded, &short, &params, true).unwrap();
    let base_n = decode_short_term(&encoded, &short, &params, false).unwrap();
    assert_eq!(base_c.shape(), (4, 8));
    for t in 0..3 {
        let mut bumped = short.clone();
        for r in t + 1..4 {
            for v in bumped.row_mut(r) {
                *v += rng.random_range(-2.0..2.0);
            }
        }
        let causal = decode_short_term(&encoded, &bumped, &params, true).unwrap();
        assert_eq!(causal.row(t), base_c.row(t), "causal row {t}");
        let open = decode_short_term(&encoded, &bumped, &params, false).unwrap();
        assert_ne!(open.row(t), base_n.row(t), "non-causal row {t}");
    }
}

#[test]
fn zero_classifier_is_uniform() {
    let mut params = ModelParams::init(&tiny(Design::TwoStage), 9).unwrap();
    let cls = params.layout().classifier.clone();
    *params.store_mut().get_mut(cls.w) = Matrix::zeros(8, 4);
    *params.store_mut().get_mut(cls.b) = Matrix::zeros(1, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pred = classify(&random(&mut rng, 6, 8), &params).unwrap();
    for t in 0..6 {
        for &p in pred.position(t) {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }
}

#[test]
fn twenty_classes_give_21_way_rows() {
    let cfg = ModelConfig {
        classes: 20,
        ..tiny(Design::TwoStage)
    };
    let params = ModelParams::init(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pred = classify(&random(&mut rng, 3, 8), &params).unwrap();
    assert_eq!(pred.classes(), 21);
    for t in 0..3 {
        assert!((pred.position(t).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn instrumented_encoder_matches_closed_form() {
    for cfg in [
        tiny(Design::TwoStage),
        ModelConfig {
            long_len: 0,
            ..tiny(Design::TwoStage)
        },
        ModelConfig {
            feature_dim: 16,
            long_len: 64,
            heads: 4,
            ..tiny(Design::TwoStage)
        },
    ] {
        let params = ModelParams::init(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let long = random(&mut rng, cfg.long_len, cfg.feature_dim);
        let short = random(&mut rng, cfg.short_len, cfg.feature_dim);
        let (_, counters) = params
            .inference::<f64>()
            .predict_counted(&long, &short, true)
            .unwrap();
        assert_eq!(counters.encoder_scores(), count_macs(&cfg, MacMode::TwoStage));
        let n0 = cfg.stage1_tokens as u64;
        let expected_cross = n0 * cfg.long_len as u64 * cfg.feature_dim as u64;
        assert_eq!(counters.scores_at(Site::cross(Region::Stage1)), expected_cross);
    }
}

#[test]
fn parameter_count_ignores_memory_lengths() {
    let a = ModelParams::init(&tiny(Design::TwoStage), 0).unwrap();
    let b = ModelParams::init(
        &ModelConfig {
            short_len: 40,
            long_len: 900,
            ..tiny(Design::TwoStage)
        },
        0,
    )
    .unwrap();
    assert_eq!(a.param_count(), b.param_count());
}

#[test]
fn every_design_predicts_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for design in Design::ALL {
        let cfg = tiny(design);
        let params = ModelParams::init(&cfg, 4).unwrap();
        let model = params.inference::<f64>();
        for long_rows in [0, 12] {
            let long = random(&mut rng, long_rows, 8);
            let short = random(&mut rng, 4, 8);
            let pred = model.predict(&long, &short, true).unwrap();
            let expected_rows = if design == Design::NoDecoder { 1 } else { 4 };
            assert_eq!(pred.positions(), expected_rows, "{design}");
            for t in 0..pred.positions() {
                let row = pred.position(t);
                assert!(row.iter().all(|p| *p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6, "{design}");
            }
        }
    }
}

#[test]
fn predictions_are_deterministic() {
    let params = ModelParams::init(&tiny(Design::TwoStage), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let long = random(&mut rng, 12, 8);
    let short = random(&mut rng, 4, 8);
    let a = params
        .inference::<f32>()
        .predict(&long.cast(), &short.cast(), true)
        .unwrap();
    let b = params
        .inference::<f32>()
        .predict(&long.cast(), &short.cast(), true)
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn stage1_tokens_receive_gradient() {
    let params = ModelParams::init(&tiny(Design::TwoStage), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::with_params(params.store());
    let long = tape.input(random(&mut rng, 12, 8));
    let short = tape.input(random(&mut rng, 4, 8));
    let probs = params.layout().forward(&mut tape, &long, &short, true).unwrap();
    let loss = tape.nll(&probs, &[0, 1, 2, 3]).unwrap();
    let grads = tape.backward(loss);
    let per_param = tape.param_grads(&grads);
    let id = params.layout().stage1_tokens.unwrap();
    assert!(per_param[id.index()].max_abs_diff(&Matrix::zeros(3, 8)) > 1e-8);
}

#[test]
fn checkpoint_round_trip() {
    for design in Design::ALL {
        let params = ModelParams::init(&tiny(design), 12).unwrap();
        let bytes = params.to_bytes().unwrap();
        let back = ModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(back.config(), params.config());
        assert_eq!(back.store(), params.store());
    }
}

#[test]
fn checkpoint_rejects_damage() {
    let params = ModelParams::init(&tiny(Design::TwoStage), 12).unwrap();
    let bytes = params.to_bytes().unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        ModelParams::from_bytes(&bad_magic),
        Err(Error::Format { .. })
    ));

    assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 3]).is_err());

    // Shrinking the feature width leaves every blob misshapen.
    let mut wrong_width = bytes.clone();
    wrong_width[12..16].copy_from_slice(&4u32.to_le_bytes());
    assert!(ModelParams::from_bytes(&wrong_width).is_err());

    // A blob the layout never asks for.
    let mut extra = bytes;
    extra.extend_from_slice(&3u32.to_le_bytes());
    extra.extend_from_slice(b"odd");
    extra.extend_from_slice(&1u32.to_le_bytes());
    extra.extend_from_slice(&1u32.to_le_bytes());
    extra.extend_from_slice(&0f64.to_le_bytes());
    assert!(ModelParams::from_bytes(&extra).is_err());
}
