//! The long/short-term memory classifier.
//!
//! The long memory is compressed in two stages: `n0` learned tokens
//! cross-attend to the long view, then `n1` learned tokens attend to that
//! summary over `l_enc` units. The short memory then queries the summary
//! through `l_dec` decoder units and every short position is classified
//! into `K + 1` classes.

mod checkpoint;
mod config;
mod macs;

use std::sync::Arc;

pub use checkpoint::CHECKPOINT_MAGIC;
pub use config::{Design, ModelConfig};
pub use macs::{count_macs, AttnKind, MacCounters, MacMode, Region, Site};

use crate::attention::{
    directional_mask, transformer_decoder_unit, Affine, AttentionMask, DecoderUnitParams,
};
use crate::error::{Error, Result};
use crate::numerics::{Eval, Graph, Matrix, Real};
use crate::params::{Init, Initializer, Loader, ParamId, ParamSource, ParamStore};

const TOKEN_INIT_STD: f64 = 0.5;

/// Parameter ids of every block, rebuilt from the config.
#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub config: ModelConfig,
    pub stage1_tokens: Option<ParamId>,
    pub stage2_tokens: Option<ParamId>,
    pub stage1_unit: Option<DecoderUnitParams>,
    pub stage2_units: Vec<DecoderUnitParams>,
    pub decoder_units: Vec<DecoderUnitParams>,
    /// Hidden layer between pooling and the classifier (no-decoder design).
    pub head_hidden: Option<Affine>,
    pub classifier: Affine,
}

impl ModelLayout {
    pub fn build(config: &ModelConfig, src: &mut dyn ParamSource) -> Result<Self> {
        config.validate()?;
        let c = config.feature_dim;
        let unit = |src: &mut dyn ParamSource, name: String, cross: bool| {
            DecoderUnitParams::build(src, &name, c, config.heads, config.ff_width, cross)
        };
        let tokens = |src: &mut dyn ParamSource, name: &str, n: usize| {
            src.param(name, n, c, Init::Normal(TOKEN_INIT_STD))
        };

        let mut stage1_tokens = None;
        let mut stage2_tokens = None;
        let mut stage1_unit = None;
        let mut stage2_units = Vec::new();
        let mut decoder_units = Vec::new();
        match config.design {
            Design::TwoStage | Design::NoDecoder => {
                stage1_tokens = Some(tokens(src, "stage1.tokens", config.stage1_tokens)?);
                stage2_tokens = Some(tokens(src, "stage2.tokens", config.stage2_tokens)?);
                stage1_unit = Some(unit(src, "stage1.unit".into(), true)?);
                for l in 0..config.encoder_layers {
                    stage2_units.push(unit(src, format!("stage2.unit{l}"), true)?);
                }
            }
            Design::OneStage => {
                stage2_tokens = Some(tokens(src, "stage2.tokens", config.stage2_tokens)?);
                for l in 0..=config.encoder_layers {
                    stage2_units.push(unit(src, format!("stage2.unit{l}"), true)?);
                }
            }
            Design::EncoderOnly => {
                let total = 1 + config.encoder_layers + config.decoder_layers;
                for l in 0..total {
                    decoder_units.push(unit(src, format!("encoder.unit{l}"), false)?);
                }
            }
            Design::DecoderOnly => {}
        }
        if matches!(
            config.design,
            Design::TwoStage | Design::OneStage | Design::DecoderOnly
        ) {
            for l in 0..config.decoder_layers {
                decoder_units.push(unit(src, format!("decoder.unit{l}"), true)?);
            }
        }
        let head_hidden = if config.design == Design::NoDecoder {
            Some(Affine::build(src, "head.hidden", c, c)?)
        } else {
            None
        };
        Ok(ModelLayout {
            config: config.clone(),
            stage1_tokens,
            stage2_tokens,
            stage1_unit,
            stage2_units,
            decoder_units,
            head_hidden,
            classifier: Affine::build(src, "classifier", c, config.outputs())?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn require<T: Clone>(&self, v: &Option<T>, what: &str) -> Result<T> {
        v.clone()
            .ok_or_else(|| Error::Config(format!("design {} has no {what}", self.config.design)))
    }

    fn check_cols<G: Graph>(&self, g: &G, node: &G::Node, op: &'static str) -> Result<()> {
        let (r, c) = g.shape(node);
        if c != self.config.feature_dim {
            return Err(Error::shape(op, (r, c), (r, self.config.feature_dim)));
        }
        Ok(())
    }

    /// Stage-1 tokens after their self-attention sub-block. The result does
    /// not depend on any input, which is what lets a streaming engine cache
    /// the stage-1 queries.
    pub fn stage1_queries<G: Graph>(&self, g: &mut G) -> Result<G::Node> {
        let unit = self.require(&self.stage1_unit, "stage-1 unit")?;
        let tokens = g.param(self.require(&self.stage1_tokens, "stage-1 tokens")?);
        crate::attention::self_block(g, &tokens, None, &unit, Region::Stage1)
    }

    /// Stage 2 on top of a stage-1 summary (or the null memory).
    pub fn stage2<G: Graph>(&self, g: &mut G, summary: &G::Node) -> Result<G::Node> {
        let mut x = g.param(self.require(&self.stage2_tokens, "stage-2 tokens")?);
        for unit in &self.stage2_units {
            x = transformer_decoder_unit(g, &x, Some(summary), None, unit, Region::Stage2)?;
        }
        Ok(x)
    }

    /// Two-stage compression of a long view with any number of rows into
    /// `n1 × C` tokens.
    pub fn encode<G: Graph>(&self, g: &mut G, long: &G::Node) -> Result<G::Node> {
        self.check_cols(g, long, "encode_long_memory")?;
        let tokens = g.param(self.require(&self.stage1_tokens, "stage-1 tokens")?);
        let summary = if g.shape(long).0 == 0 {
            tokens
        } else {
            let unit = self.require(&self.stage1_unit, "stage-1 unit")?;
            transformer_decoder_unit(g, &tokens, Some(long), None, &unit, Region::Stage1)?
        };
        self.stage2(g, &summary)
    }

    /// Short-term decoder: short tokens query `memory`. `None` skips the
    /// cross-attention blocks.
    pub fn decode<G: Graph>(
        &self,
        g: &mut G,
        memory: Option<&G::Node>,
        short: &G::Node,
        causal: bool,
    ) -> Result<G::Node> {
        self.check_cols(g, short, "decode_short_term")?;
        let mask = self.mask(g.shape(short).0, causal)?;
        let mut x = short.clone();
        for unit in &self.decoder_units {
            x = transformer_decoder_unit(g, &x, memory, mask.as_ref(), unit, Region::Decoder)?;
        }
        Ok(x)
    }

    fn mask(&self, len: usize, causal: bool) -> Result<Option<AttentionMask>> {
        if causal {
            directional_mask(len).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Class probabilities, one row per token state.
    pub fn classify<G: Graph>(&self, g: &mut G, states: &G::Node) -> Result<G::Node> {
        self.check_cols(g, states, "classify")?;
        let logits = self.classifier.apply(g, states)?;
        g.softmax_rows(&logits, None)
    }

    /// Full forward pass. Returns `m_S × (K + 1)` probabilities, or a single
    /// row for the newest frame in the no-decoder design.
    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        long: &G::Node,
        short: &G::Node,
        causal: bool,
    ) -> Result<G::Node> {
        self.check_cols(g, long, "forward")?;
        self.check_cols(g, short, "forward")?;
        let has_long = g.shape(long).0 > 0;
        match self.config.design {
            Design::TwoStage => {
                let encoded = self.encode(g, long)?;
                let states = self.decode(g, Some(&encoded), short, causal)?;
                self.classify(g, &states)
            }
            Design::OneStage => {
                let null = g.param(self.require(&self.stage2_tokens, "stage-2 tokens")?);
                let memory = if has_long { long.clone() } else { null.clone() };
                let mut x = null;
                for unit in &self.stage2_units {
                    x = transformer_decoder_unit(g, &x, Some(&memory), None, unit, Region::Stage2)?;
                }
                let states = self.decode(g, Some(&x), short, causal)?;
                self.classify(g, &states)
            }
            Design::EncoderOnly => {
                let short_rows = g.shape(short).0;
                let seq = g.concat_rows(&[long.clone(), short.clone()])?;
                let total = g.shape(&seq).0;
                let mask = self.mask(total, causal)?;
                let mut x = seq;
                for unit in &self.decoder_units {
                    x = transformer_decoder_unit(g, &x, None, mask.as_ref(), unit, Region::Stage2)?;
                }
                let states = g.slice_rows(&x, total - short_rows, short_rows)?;
                self.classify(g, &states)
            }
            Design::DecoderOnly => {
                let memory = has_long.then(|| long.clone());
                let states = self.decode(g, memory.as_ref(), short, causal)?;
                self.classify(g, &states)
            }
            Design::NoDecoder => {
                let seq = g.concat_rows(&[long.clone(), short.clone()])?;
                let encoded = self.encode(g, &seq)?;
                let pooled = g.mean_rows(&encoded);
                let hidden = self.require(&self.head_hidden, "pooling head")?;
                let h = hidden.apply(g, &pooled)?;
                let h = g.relu(&h);
                self.classify(g, &h)
            }
        }
    }
}

/// Trained or freshly initialized weights together with their layout.
#[derive(Clone, Debug)]
pub struct ModelParams {
    layout: ModelLayout,
    store: ParamStore,
}

impl ModelParams {
    /// Fresh parameters drawn from a seeded generator.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::from_source(config, Box::new(Initializer::new(seed)))
    }

    /// Parameters taken from named blobs; every blob must be used exactly once.
    pub fn from_blobs(
        config: &ModelConfig,
        blobs: impl IntoIterator<Item = (String, Matrix)>,
    ) -> Result<Self> {
        Self::from_source(config, Box::new(Loader::new(blobs)))
    }

    fn from_source(config: &ModelConfig, mut src: Box<dyn ParamSource>) -> Result<Self> {
        let layout = ModelLayout::build(config, src.as_mut())?;
        let store = src.into_store()?;
        Ok(Self { layout, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.layout.config
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// A read-only copy of the weights at precision `F`.
    pub fn inference<F: Real>(&self) -> InferenceModel<F> {
        InferenceModel {
            layout: self.layout.clone(),
            weights: self.store.shared(),
        }
    }
}

/// Eager evaluation of a model at precision `F`. Cheap to clone; clones
/// share the weights.
#[derive(Clone, Debug)]
pub struct InferenceModel<F: Real> {
    layout: ModelLayout,
    weights: Vec<Arc<Matrix<F>>>,
}

impl<F: Real> InferenceModel<F> {
    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn config(&self) -> &ModelConfig {
        &self.layout.config
    }

    pub fn graph(&self) -> Eval<'_, F> {
        Eval::new(&self.weights)
    }

    pub fn weight(&self, id: ParamId) -> &Matrix<F> {
        &self.weights[id.index()]
    }

    pub fn predict(&self, long: &Matrix<F>, short: &Matrix<F>, causal: bool) -> Result<Prediction<F>> {
        self.predict_counted(long, short, causal).map(|(p, _)| p)
    }

    pub fn predict_counted(
        &self,
        long: &Matrix<F>,
        short: &Matrix<F>,
        causal: bool,
    ) -> Result<(Prediction<F>, MacCounters)> {
        let mut g = self.graph();
        let l = g.input(long.clone());
        let s = g.input(short.clone());
        let probs = self.layout.forward(&mut g, &l, &s, causal)?;
        Ok((Prediction::new(Arc::unwrap_or_clone(probs)), g.into_counters()))
    }

    pub fn encode_long_memory(&self, long_view: &Matrix<F>) -> Result<Matrix<F>> {
        let mut g = self.graph();
        let l = g.input(long_view.clone());
        Ok(Arc::unwrap_or_clone(self.layout.encode(&mut g, &l)?))
    }

    pub fn decode_short_term(
        &self,
        encoded: &Matrix<F>,
        short_view: &Matrix<F>,
        causal: bool,
    ) -> Result<Matrix<F>> {
        let mut g = self.graph();
        let e = g.input(encoded.clone());
        let s = g.input(short_view.clone());
        Ok(Arc::unwrap_or_clone(self.layout.decode(
            &mut g,
            Some(&e),
            &s,
            causal,
        )?))
    }

    pub fn classify(&self, token_states: &Matrix<F>) -> Result<Prediction<F>> {
        let mut g = self.graph();
        let s = g.input(token_states.clone());
        Ok(Prediction::new(Arc::unwrap_or_clone(
            self.layout.classify(&mut g, &s)?,
        )))
    }
}

/// Compress a long view into `n1 × C` tokens.
pub fn encode_long_memory(long_view: &Matrix, params: &ModelParams) -> Result<Matrix> {
    params.inference().encode_long_memory(long_view)
}

/// Decode short-term token states against an encoded long memory.
pub fn decode_short_term(
    encoded: &Matrix,
    short_view: &Matrix,
    params: &ModelParams,
    causal: bool,
) -> Result<Matrix> {
    params.inference().decode_short_term(encoded, short_view, causal)
}

pub fn classify(token_states: &Matrix, params: &ModelParams) -> Result<Prediction> {
    params.inference().classify(token_states)
}

/// Per-position class probabilities, oldest position first. Column 0 is
/// background.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<F: Real = f64> {
    probs: Matrix<F>,
}

impl<F: Real> Prediction<F> {
    pub fn new(probs: Matrix<F>) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> &Matrix<F> {
        &self.probs
    }

    pub fn into_probs(self) -> Matrix<F> {
        self.probs
    }

    pub fn positions(&self) -> usize {
        self.probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn position(&self, t: usize) -> &[F] {
        self.probs.row(t)
    }

    /// Probabilities for the most recent frame.
    pub fn newest(&self) -> &[F] {
        self.probs.row(self.probs.rows() - 1)
    }

    pub fn newest_class(&self) -> usize {
        argmax(self.newest())
    }
}

pub(crate) fn argmax<F: Real>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
