//! Multi-head attention and the transformer decoder unit.
//!
//! A decoder unit maps `n` output tokens and `m` input tokens to `n` new
//! tokens: masked self-attention over the output tokens, cross-attention
//! from them into the input tokens, then a position-wise feed-forward
//! block. Each sub-block is followed by a residual add and a layer norm
//! (post-norm).

use crate::error::{Error, Result};
use crate::model::{Region, Site};
use crate::numerics::Graph;
use crate::params::{Init, ParamId, ParamSource};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Which keys each query may attend to. `true` = allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        Self { rows, cols, allowed }
    }

    /// Causal mask over `len` positions ordered oldest first: position `t`
    /// sees positions `0..=t`.
    pub fn directional(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config(
                "directional mask needs at least one position".into(),
            ));
        }
        Ok(Self::from_fn(len, len, |r, c| c <= r))
    }

    #[inline]
    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn allowed_in_row(&self, row: usize) -> usize {
        self.allowed[row * self.cols..(row + 1) * self.cols]
            .iter()
            .filter(|a| **a)
            .count()
    }
}

/// Same as [`AttentionMask::directional`].
pub fn directional_mask(len: usize) -> Result<AttentionMask> {
    AttentionMask::directional(len)
}

/// Query/key/value/output projections of one attention block.
#[derive(Clone, Debug)]
pub struct AttentionProjections {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionProjections {
    fn build(src: &mut dyn ParamSource, prefix: &str, width: usize) -> Result<Self> {
        let mut w = |n: &str| src.param(&format!("{prefix}.{n}"), width, width, Init::Xavier);
        let (wq, wk, wv, wo) = (w("wq")?, w("wk")?, w("wv")?, w("wo")?);
        let mut b = |n: &str| src.param(&format!("{prefix}.{n}"), 1, width, Init::Zeros);
        Ok(Self {
            wq,
            bq: b("bq")?,
            wk,
            bk: b("bk")?,
            wv,
            bv: b("bv")?,
            wo,
            bo: b("bo")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    fn build(src: &mut dyn ParamSource, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: src.param(&format!("{prefix}.gain"), 1, width, Init::Ones)?,
            bias: src.param(&format!("{prefix}.bias"), 1, width, Init::Zeros)?,
        })
    }

    pub fn apply<G: Graph>(&self, g: &mut G, x: &G::Node) -> Result<G::Node> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, &gain, &bias, LAYER_NORM_EPS)
    }
}

/// Affine map `x · w + b`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn build(src: &mut dyn ParamSource, prefix: &str, inp: usize, out: usize) -> Result<Self> {
        Ok(Self {
            w: src.param(&format!("{prefix}.w"), inp, out, Init::Xavier)?,
            b: src.param(&format!("{prefix}.b"), 1, out, Init::Zeros)?,
        })
    }

    pub fn apply<G: Graph>(&self, g: &mut G, x: &G::Node) -> Result<G::Node> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, &w)?;
        g.add_row(&y, &b)
    }
}

#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub attn: AttentionProjections,
    pub norm: Norm,
}

/// Weights of one transformer decoder unit. Units built without a cross
/// block act as plain transformer encoder units.
#[derive(Clone, Debug)]
pub struct DecoderUnitParams {
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub self_attn: AttentionProjections,
    pub self_norm: Norm,
    pub cross: Option<CrossBlock>,
    pub ff_in: Affine,
    pub ff_out: Affine,
    pub ff_norm: Norm,
}

impl DecoderUnitParams {
    pub fn build(
        src: &mut dyn ParamSource,
        prefix: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        with_cross: bool,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        let self_attn = AttentionProjections::build(src, &format!("{prefix}.self"), width)?;
        let self_norm = Norm::build(src, &format!("{prefix}.self_norm"), width)?;
        let cross = if with_cross {
            Some(CrossBlock {
                attn: AttentionProjections::build(src, &format!("{prefix}.cross"), width)?,
                norm: Norm::build(src, &format!("{prefix}.cross_norm"), width)?,
            })
        } else {
            None
        };
        Ok(Self {
            width,
            heads,
            ff_width,
            self_attn,
            self_norm,
            cross,
            ff_in: Affine::build(src, &format!("{prefix}.ff_in"), width, ff_width)?,
            ff_out: Affine::build(src, &format!("{prefix}.ff_out"), ff_width, width)?,
            ff_norm: Norm::build(src, &format!("{prefix}.ff_norm"), width)?,
        })
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

/// Scaled dot-product attention with `heads` heads of width `C / heads`.
///
/// Score products and weighted sums are charged to `site` on the graph's
/// MAC counters (`q_rows · k_rows · C` each).
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<G: Graph>(
    g: &mut G,
    queries: &G::Node,
    keys: &G::Node,
    values: &G::Node,
    mask: Option<&AttentionMask>,
    proj: &AttentionProjections,
    heads: usize,
    site: Site,
) -> Result<G::Node> {
    let (nq, width) = g.shape(queries);
    let (nk, kc) = g.shape(keys);
    let (nv, vc) = g.shape(values);
    if kc != width || vc != width {
        return Err(Error::shape(
            "multi_head_attention",
            (nq, width),
            (nk, kc.max(vc)),
        ));
    }
    if nk != nv {
        return Err(Error::shape("multi_head_attention", (nk, kc), (nv, vc)));
    }
    if let Some(m) = mask {
        if m.shape() != (nq, nk) {
            return Err(Error::shape("multi_head_attention mask", (nq, nk), m.shape()));
        }
    }
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "width {width} is not divisible by {heads} heads"
        )));
    }
    if nk == 0 && nq > 0 {
        return Err(Error::FullyMaskedRow { row: 0 });
    }

    let q = project(g, queries, proj.wq, proj.bq)?;
    let k = project(g, keys, proj.wk, proj.bk)?;
    let v = project(g, values, proj.wv, proj.bv)?;
    let hw = width / heads;
    let scale = 1.0 / (hw as f64).sqrt();

    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(&q, h * hw, hw)?;
        let kh = g.slice_cols(&k, h * hw, hw)?;
        let vh = g.slice_cols(&v, h * hw, hw)?;
        let scores = g.matmul_nt(&qh, &kh)?;
        let scores = g.scale(&scores, scale);
        let weights = g.softmax_rows(&scores, mask)?;
        outs.push(g.matmul(&weights, &vh)?);
    }
    let macs = (nq * nk * width) as u64;
    g.counters_mut().record_scores(site, macs);
    g.counters_mut().record_weighted(site, macs);

    let joined = if heads == 1 {
        outs.pop().expect("one head")
    } else {
        g.concat_cols(&outs)?
    };
    project(g, &joined, proj.wo, proj.bo)
}

pub(crate) fn project<G: Graph>(g: &mut G, x: &G::Node, w: ParamId, b: ParamId) -> Result<G::Node> {
    let w = g.param(w);
    let b = g.param(b);
    let y = g.matmul(x, &w)?;
    g.add_row(&y, &b)
}

/// Self-attention sub-block: `LN(x + SelfAttn(x))`.
pub(crate) fn self_block<G: Graph>(
    g: &mut G,
    tokens: &G::Node,
    mask: Option<&AttentionMask>,
    unit: &DecoderUnitParams,
    region: Region,
) -> Result<G::Node> {
    let attn = multi_head_attention(
        g,
        tokens,
        tokens,
        tokens,
        mask,
        &unit.self_attn,
        unit.heads,
        Site::self_attn(region),
    )?;
    let sum = g.add(tokens, &attn)?;
    unit.self_norm.apply(g, &sum)
}

/// Residual, norm and feed-forward applied after cross-attention output
/// `attn` has been computed for queries `x`.
pub(crate) fn finish_cross<G: Graph>(
    g: &mut G,
    x: &G::Node,
    attn: &G::Node,
    cross: &CrossBlock,
    unit: &DecoderUnitParams,
) -> Result<G::Node> {
    let sum = g.add(x, attn)?;
    let y = cross.norm.apply(g, &sum)?;
    feed_forward_block(g, &y, unit)
}

/// `LN(x + W2 · max(0, W1 · x))`.
pub(crate) fn feed_forward_block<G: Graph>(
    g: &mut G,
    x: &G::Node,
    unit: &DecoderUnitParams,
) -> Result<G::Node> {
    let hidden = unit.ff_in.apply(g, x)?;
    let hidden = g.relu(&hidden);
    let out = unit.ff_out.apply(g, &hidden)?;
    let sum = g.add(x, &out)?;
    unit.ff_norm.apply(g, &sum)
}

/// One transformer decoder unit.
///
/// `input_tokens = None` skips cross-attention (the unit then behaves as an
/// encoder unit). Supplying input tokens to a unit without a cross block is
/// an error.
pub fn transformer_decoder_unit<G: Graph>(
    g: &mut G,
    output_tokens: &G::Node,
    input_tokens: Option<&G::Node>,
    self_mask: Option<&AttentionMask>,
    unit: &DecoderUnitParams,
    region: Region,
) -> Result<G::Node> {
    let (n, c) = g.shape(output_tokens);
    if c != unit.width {
        return Err(Error::shape("transformer_decoder_unit", (n, c), (n, unit.width)));
    }
    let x = self_block(g, output_tokens, self_mask, unit, region)?;
    match (input_tokens, &unit.cross) {
        (Some(inp), Some(cross)) => {
            let attn = multi_head_attention(
                g,
                &x,
                inp,
                inp,
                None,
                &cross.attn,
                unit.heads,
                Site::cross(region),
            )?;
            finish_cross(g, &x, &attn, cross, unit)
        }
        (None, _) => feed_forward_block(g, &x, unit),
        (Some(_), None) => Err(Error::Config(
            "input tokens given to a unit without cross-attention".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{gradient_check, Eval, Matrix};
    use crate::params::{Initializer, ParamStore};

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn unit(width: usize, heads: usize, seed: u64) -> (DecoderUnitParams, ParamStore) {
        let mut src = Box::new(Initializer::new(seed));
        let unit = DecoderUnitParams::build(src.as_mut(), "u", width, heads, 2 * width, true).unwrap();
        let mut store = src.into_store().unwrap();
        // Random biases and norm parameters, so every weight matters.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for m in store.values_mut() {
            if m.rows() == 1 {
                for v in m.data_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
        }
        (unit, store)
    }

    #[test]
    fn directional_mask_counts() {
        let m = directional_mask(1).unwrap();
        assert!(m.allows(0, 0));
        let m = directional_mask(3).unwrap();
        assert_eq!(
            (0..3).map(|r| m.allowed_in_row(r)).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert!(directional_mask(0).is_err());
    }

    /// Scalar triple-loop attention, independent of the matrix kernels.
    fn naive_attention(
        q_in: &Matrix,
        k_in: &Matrix,
        v_in: &Matrix,
        proj: &AttentionProjections,
        store: &ParamStore,
        heads: usize,
    ) -> Matrix {
        let c = q_in.cols();
        let proj_rows = |x: &Matrix, w: ParamId, b: ParamId| -> Vec<Vec<f64>> {
            let (w, b) = (store.get(w), store.get(b));
            (0..x.rows())
                .map(|r| {
                    (0..c)
                        .map(|j| {
                            let mut s = b.get(0, j);
                            for i in 0..c {
                                s += x.get(r, i) * w.get(i, j);
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        };
        let q = proj_rows(q_in, proj.wq, proj.bq);
        let k = proj_rows(k_in, proj.wk, proj.bk);
        let v = proj_rows(v_in, proj.wv, proj.bv);
        let hw = c / heads;
        let mut joined = Matrix::zeros(q.len(), c);
        for h in 0..heads {
            let cols = h * hw..(h + 1) * hw;
            for (i, qi) in q.iter().enumerate() {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kj| cols.clone().map(|d| qi[d] * kj[d]).sum::<f64>() / (hw as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for d in cols.clone() {
                    let val: f64 = exps.iter().zip(&v).map(|(e, vj)| e / total * vj[d]).sum();
                    joined.set(i, d, val);
                }
            }
        }
        let out = proj_rows(&joined, proj.wo, proj.bo);
        Matrix::from_rows(c, &out).unwrap()
    }

    #[test]
    fn attention_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for heads in [1, 2, 4] {
            let (u, store) = unit(8, heads, 3);
            let weights: Vec<Arc<Matrix>> = store.shared();
            let q = random(&mut rng, 2, 8);
            let kv = random(&mut rng, 3, 8);
            let mut g = Eval::new(&weights);
            let (qn, kn) = (g.input(q.clone()), g.input(kv.clone()));
            let out = multi_head_attention(
                &mut g,
                &qn,
                &kn,
                &kn,
                None,
                &u.self_attn,
                heads,
                Site::self_attn(Region::Other),
            )
            .unwrap();
            let oracle = naive_attention(&q, &kv, &kv, &u.self_attn, &store, heads);
            assert!(out.max_abs_diff(&oracle) < 1e-10, "heads={heads}");
            assert_eq!(g.counters().total_scores(), 2 * 3 * 8);
        }
    }

    #[test]
    fn single_key_output_is_independent_of_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (u, store) = unit(8, 2, 5);
        let weights = store.shared::<f64>();
        let kv = random(&mut rng, 1, 8);
        let mut outputs = Vec::new();
        for _ in 0..3 {
            let mut g = Eval::new(&weights);
            let q = g.input(random(&mut rng, 1, 8));
            let k = g.input(kv.clone());
            outputs.push(
                multi_head_attention(
                    &mut g,
                    &q,
                    &k,
                    &k,
                    None,
                    &u.cross.as_ref().unwrap().attn,
                    2,
                    Site::self_attn(Region::Other),
                )
                .unwrap(),
            );
        }
        assert!(outputs[0].max_abs_diff(&outputs[1]) < 1e-14);
        assert!(outputs[0].max_abs_diff(&outputs[2]) < 1e-14);
    }

    #[test]
    fn identical_keys_average_values() {
        // Identity projections with zero bias: output = mean of value rows.
        let mut store = ParamStore::new();
        let c = 4;
        let mut ids = Vec::new();
        for i in 0..4 {
            ids.push(store.push(format!("w{i}"), Matrix::identity(c)));
            ids.push(store.push(format!("b{i}"), Matrix::zeros(1, c)));
        }
        let proj = AttentionProjections {
            wq: ids[0],
            bq: ids[1],
            wk: ids[2],
            bk: ids[3],
            wv: ids[4],
            bv: ids[5],
            wo: ids[6],
            bo: ids[7],
        };
        let weights = store.shared::<f64>();
        let mut g = Eval::new(&weights);
        let q = g.input(Matrix::from_fn(2, c, |r, k| (r + k) as f64));
        let keys = g.input(Matrix::filled(3, c, 0.5));
        let values = g.input(Matrix::from_fn(3, c, |r, k| (r * 10 + k) as f64));
        let out = multi_head_attention(
            &mut g,
            &q,
            &keys,
            &values,
            None,
            &proj,
            2,
            Site::self_attn(Region::Other),
        )
        .unwrap();
        for r in 0..2 {
            for k in 0..c {
                assert!((out.get(r, k) - (10.0 + k as f64)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_row_rejected() {
        let (u, store) = unit(4, 1, 0);
        let weights = store.shared::<f64>();
        let mut g = Eval::new(&weights);
        let x = g.input(Matrix::filled(2, 4, 0.1));
        let mask = AttentionMask::from_fn(2, 2, |r, _| r == 1);
        let err = multi_head_attention(
            &mut g,
            &x,
            &x,
            &x,
            Some(&mask),
            &u.self_attn,
            1,
            Site::self_attn(Region::Other),
        )
        .unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 0 }));
    }

    #[test]
    fn permuting_keys_with_values_is_harmless() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (u, store) = unit(8, 4, 2);
        let weights = store.shared::<f64>();
        let q = random(&mut rng, 3, 8);
        let kv = random(&mut rng, 5, 8);
        let perm = [3, 0, 4, 1, 2];
        let run = |kv: Matrix| {
            let mut g = Eval::new(&weights);
            let (qn, kn) = (g.input(q.clone()), g.input(kv));
            multi_head_attention(
                &mut g,
                &qn,
                &kn,
                &kn,
                None,
                &u.self_attn,
                4,
                Site::self_attn(Region::Other),
            )
            .unwrap()
        };
        let a = run(kv.clone());
        let b = run(kv.select_rows(&perm));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn minimal_unit_shape() {
        let (u, store) = unit(8, 2, 4);
        let weights = store.shared::<f64>();
        let mut g = Eval::new(&weights);
        let out_tok = g.input(Matrix::filled(1, 8, 0.3));
        let inp = g.input(Matrix::filled(1, 8, -0.2));
        let y = transformer_decoder_unit(&mut g, &out_tok, Some(&inp), None, &u, Region::Other).unwrap();
        assert_eq!(y.shape(), (1, 8));
    }

    #[test]
    fn unit_score_macs_follow_n2c_plus_nmc() {
        let (u, store) = unit(8, 2, 4);
        let weights = store.shared::<f64>();
        let mut g = Eval::new(&weights);
        let out_tok = g.input(Matrix::filled(3, 8, 0.3));
        let inp = g.input(Matrix::filled(11, 8, -0.2));
        transformer_decoder_unit(&mut g, &out_tok, Some(&inp), None, &u, Region::Stage2).unwrap();
        assert_eq!(g.counters().scores(Region::Stage2), (3 * 3 + 3 * 11) * 8);
    }

    #[test]
    fn input_rows_influence_output() {
        // Finite-difference sensitivity: nudging any input row moves the output.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (u, store) = unit(8, 2, 6);
        let weights = store.shared::<f64>();
        let out_tok = random(&mut rng, 2, 8);
        let inp = random(&mut rng, 4, 8);
        let run = |inp: Matrix| {
            let mut g = Eval::new(&weights);
            let (o, i) = (g.input(out_tok.clone()), g.input(inp));
            transformer_decoder_unit(&mut g, &o, Some(&i), None, &u, Region::Other).unwrap()
        };
        let base = run(inp.clone());
        for row in 0..4 {
            let mut bumped = inp.clone();
            bumped.row_mut(row)[0] += 1e-3;
            assert!(run(bumped).max_abs_diff(&base) > 1e-9, "row {row}");
        }
    }

    #[test]
    fn decoder_unit_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (u, store) = unit(8, 2, 8);
        let mask = directional_mask(3).unwrap();
        let mut inputs = vec![random(&mut rng, 3, 8), random(&mut rng, 5, 8)];
        inputs.extend(store.iter().map(|(_, m)| m.clone()));
        let report = gradient_check(
            |t, v| {
                t.set_param_vars(v[2..].to_vec());
                transformer_decoder_unit(t, &v[0], Some(&v[1]), Some(&mask), &u, Region::Other)
            },
            &inputs,
            3,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
