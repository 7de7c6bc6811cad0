//! Frame-by-frame inference with cached stage-1 attention scores.
//!
//! The stage-1 queries never depend on the input, and each long-memory key
//! splits into a frame part and a positional part:
//! `((f + s_τ)·Wk + bk)·q = (f·Wk + bk)·q + (s_τ·Wk)·q`. The positional
//! half is computed once per model; the frame half is computed once per
//! frame when it enters the long memory and then reused for as long as the
//! frame stays there. Each step only adds the two halves back together.
//! Values are still projected and weighted in full.

use std::collections::VecDeque;
use std::str::FromStr;
use std::sync::Arc;

use crate::attention::finish_cross;
use crate::error::{Error, Result};
use crate::io::PredictionDump;
use crate::memory::{downsample_indices, downsample_long, MemoryState, PositionalTable};
use crate::model::{Design, InferenceModel, MacCounters, ModelParams, Prediction, Region, Site};
use crate::numerics::{dot, Graph, Matrix, Real};

/// Stage-1 quantities that stay fixed for a given model.
#[derive(Clone, Debug)]
pub struct AttentionCache<F: Real = f64> {
    heads: usize,
    /// Stage-1 tokens after self-attention, `n0 × C`; the residual input of
    /// the cross-attention block.
    queries: Matrix<F>,
    /// `queries · Wq + bq`.
    projected: Matrix<F>,
    /// Row `τ − m_S`, column `h·n0 + i`: head-`h` product of query `i` with
    /// the projected positional encoding `s_τ · Wk`.
    positional: Arc<Matrix<F>>,
    /// Frame halves aligned with the long queue, same column layout.
    frame_scores: VecDeque<Vec<F>>,
    /// Set after a reference step, which does not maintain `frame_scores`.
    stale: bool,
    /// MACs spent building the cache.
    pub build_counters: MacCounters,
}

impl<F: Real> AttentionCache<F> {
    /// Positional score table, `m_L × (H·n0)`.
    pub fn positional_scores(&self) -> &Matrix<F> {
        &self.positional
    }

    /// Stage-1 queries after the query projection, `n0 × C`.
    pub fn projected_queries(&self) -> &Matrix<F> {
        &self.projected
    }

    pub fn frame_scores(&self) -> impl ExactSizeIterator<Item = &[F]> {
        self.frame_scores.iter().map(Vec::as_slice)
    }

    fn n0(&self) -> usize {
        self.projected.rows()
    }

    /// Per-head products of every query with a projected key.
    fn score_row(&self, key: &[F]) -> Vec<F> {
        let (n0, c) = self.projected.shape();
        let hw = c / self.heads;
        let mut out = Vec::with_capacity(self.heads * n0);
        for h in 0..self.heads {
            let span = h * hw..(h + 1) * hw;
            for i in 0..n0 {
                out.push(dot(&self.projected.row(i)[span.clone()], &key[span.clone()]));
            }
        }
        out
    }
}

/// Builds the cache for a two-stage model.
pub fn init_cache<F: Real>(
    model: &InferenceModel<F>,
    table: &PositionalTable<F>,
) -> Result<AttentionCache<F>> {
    let config = model.config();
    if config.design != Design::TwoStage {
        return Err(Error::Config(format!(
            "score caching needs the two-stage design, got {}",
            config.design
        )));
    }
    if table.width() != config.feature_dim || table.len() < config.short_len + config.long_len {
        return Err(Error::shape(
            "init_cache",
            (config.short_len + config.long_len, config.feature_dim),
            (table.len(), table.width()),
        ));
    }
    let layout = model.layout();
    let unit = layout.stage1_unit.as_ref().expect("two-stage layout");
    let cross = unit.cross.as_ref().expect("stage-1 cross block");

    let mut g = model.graph();
    let queries = layout.stage1_queries(&mut g)?;
    let build_counters = g.counters().clone();
    let queries = Arc::unwrap_or_clone(queries);
    let projected = queries
        .matmul(model.weight(cross.attn.wq))?
        .add_row(model.weight(cross.attn.bq))?;

    let mut cache = AttentionCache {
        heads: config.heads,
        queries,
        projected,
        positional: Arc::new(Matrix::zeros(0, 0)),
        frame_scores: VecDeque::with_capacity(config.long_len + 1),
        stale: false,
        build_counters,
    };
    let wk = model.weight(cross.attn.wk);
    let mut positional = Vec::with_capacity(config.long_len * config.heads * cache.n0());
    for row in 0..config.long_len {
        let pos = Matrix::row_vector(table.get(config.short_len + row));
        let key = pos.matmul(wk)?;
        positional.extend(cache.score_row(key.row(0)));
    }
    cache.positional = Arc::new(Matrix::new(
        config.long_len,
        config.heads * cache.n0(),
        positional,
    )?);
    Ok(cache)
}

/// One stream's inference state.
#[derive(Clone, Debug)]
pub struct StreamingEngine<F: Real = f64> {
    model: InferenceModel<F>,
    table: PositionalTable<F>,
    memory: MemoryState<F>,
    cache: AttentionCache<F>,
    stride: usize,
    counters: MacCounters,
}

impl<F: Real> StreamingEngine<F> {
    pub fn new(params: &ModelParams) -> Result<Self> {
        Self::from_model(params.inference())
    }

    pub fn from_model(model: InferenceModel<F>) -> Result<Self> {
        let config = model.config();
        let table = PositionalTable::new(config.feature_dim, config.short_len + config.long_len);
        Self::with_table(model, table)
    }

    pub fn with_table(model: InferenceModel<F>, table: PositionalTable<F>) -> Result<Self> {
        let cache = init_cache(&model, &table)?;
        let config = model.config();
        let memory = MemoryState::new(config.feature_dim, config.short_len, config.long_len)?;
        Ok(Self {
            model,
            table,
            memory,
            cache,
            stride: 1,
            counters: MacCounters::default(),
        })
    }

    /// Keep only every `stride`-th long-memory frame, counting back from the
    /// newest.
    pub fn with_stride(mut self, stride: usize) -> Result<Self> {
        downsample_indices(0, stride)?;
        self.stride = stride;
        Ok(self)
    }

    pub fn memory(&self) -> &MemoryState<F> {
        &self.memory
    }

    pub fn cache(&self) -> &AttentionCache<F> {
        &self.cache
    }

    pub fn model(&self) -> &InferenceModel<F> {
        &self.model
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// MACs of the most recent step.
    pub fn last_counters(&self) -> &MacCounters {
        &self.counters
    }

    /// Pushes a frame and predicts with cached stage-1 scores.
    pub fn step(&mut self, frame: &[F]) -> Result<Prediction<F>> {
        let mut counters = MacCounters::default();
        self.advance(frame, &mut counters)?;
        let pred = self.predict_cached(&mut counters)?;
        self.counters = counters;
        Ok(pred)
    }

    /// Pushes a frame and keeps the cache current without predicting.
    pub fn push(&mut self, frame: &[F]) -> Result<()> {
        let mut counters = MacCounters::default();
        self.advance(frame, &mut counters)?;
        self.counters = counters;
        Ok(())
    }

    fn advance(&mut self, frame: &[F], counters: &mut MacCounters) -> Result<()> {
        let outcome = self.memory.push_frame(frame)?;
        if self.cache.stale {
            self.rebuild_frame_scores(counters)?;
        } else {
            if outcome.graduated {
                let newest = self.memory.long_frames().next_back().expect("graduated frame");
                let scores = self.frame_score(newest, counters)?;
                self.cache.frame_scores.push_back(scores);
            }
            if outcome.evicted && self.cache.frame_scores.len() > self.memory.long_count() {
                self.cache.frame_scores.pop_front();
            }
        }
        Ok(())
    }

    /// Cached prediction for the current memory, without pushing.
    pub fn cached_prediction(&self) -> Result<(Prediction<F>, MacCounters)> {
        let mut counters = MacCounters::default();
        let pred = self.predict_cached(&mut counters)?;
        Ok((pred, counters))
    }

    /// Pushes a frame and predicts by recomputing everything from the
    /// memory snapshot.
    pub fn step_reference(&mut self, frame: &[F]) -> Result<Prediction<F>> {
        self.memory.push_frame(frame)?;
        self.cache.stale = true;
        let (pred, counters) = self.reference_prediction()?;
        self.counters = counters;
        Ok(pred)
    }

    /// Reference prediction for the current memory, without pushing.
    pub fn reference_prediction(&self) -> Result<(Prediction<F>, MacCounters)> {
        let (long, short) = self.memory.snapshot(&self.table)?;
        let long = downsample_long(&long, self.stride)?;
        self.model.predict_counted(&long, &short, true)
    }

    /// Frame halves recomputed from the long queue.
    pub fn recompute_frame_scores(&self) -> Result<Vec<Vec<F>>> {
        let mut scratch = MacCounters::default();
        self.memory
            .long_frames()
            .map(|f| self.frame_score(f, &mut scratch))
            .collect()
    }

    fn rebuild_frame_scores(&mut self, counters: &mut MacCounters) -> Result<()> {
        let rebuilt = self.recompute_frame_scores()?;
        let n0c = (self.cache.n0() * self.memory.width()) as u64;
        counters.assembly_mults += n0c * rebuilt.len() as u64;
        self.cache.frame_scores = rebuilt.into();
        self.cache.stale = false;
        Ok(())
    }

    fn frame_score(&self, frame: &[F], counters: &mut MacCounters) -> Result<Vec<F>> {
        let cross = self.cross_weights();
        let key = Matrix::row_vector(frame)
            .matmul(self.model.weight(cross.attn.wk))?
            .add_row(self.model.weight(cross.attn.bk))?;
        counters.assembly_mults += (self.cache.n0() * frame.len()) as u64;
        Ok(self.cache.score_row(key.row(0)))
    }

    fn cross_weights(&self) -> &crate::attention::CrossBlock {
        let unit = self
            .model
            .layout()
            .stage1_unit
            .as_ref()
            .expect("two-stage layout");
        unit.cross.as_ref().expect("stage-1 cross block")
    }

    fn predict_cached(&self, counters: &mut MacCounters) -> Result<Prediction<F>> {
        let (long, short) = self.memory.snapshot(&self.table)?;
        let layout = self.model.layout();
        let mut g = self.model.graph();
        let short = g.input(short);
        let indices = downsample_indices(long.rows(), self.stride)?;

        let summary = if indices.is_empty() {
            g.param(layout.stage1_tokens.expect("two-stage layout"))
        } else {
            let attn = self.cached_stage1_attention(&long, &indices, counters)?;
            let queries = g.input(self.cache.queries.clone());
            let attn = g.input(attn);
            let unit = layout.stage1_unit.as_ref().expect("two-stage layout");
            finish_cross(&mut g, &queries, &attn, self.cross_weights(), unit)?
        };
        let encoded = layout.stage2(&mut g, &summary)?;
        let states = layout.decode(&mut g, Some(&encoded), &short, true)?;
        let probs = layout.classify(&mut g, &states)?;
        counters.merge(g.counters());
        Ok(Prediction::new(Arc::unwrap_or_clone(probs)))
    }

    /// Stage-1 cross-attention output (after the output projection) for the
    /// selected long rows.
    fn cached_stage1_attention(
        &self,
        long: &Matrix<F>,
        indices: &[usize],
        counters: &mut MacCounters,
    ) -> Result<Matrix<F>> {
        let cross = self.cross_weights();
        let (n0, c) = self.cache.projected.shape();
        let heads = self.cache.heads;
        let hw = c / heads;
        let scale = F::of(1.0 / (hw as f64).sqrt());
        let len = long.rows();
        let selected = long.select_rows(indices);
        let values = selected
            .matmul(self.model.weight(cross.attn.wv))?
            .add_row(self.model.weight(cross.attn.bv))?;

        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let scores = Matrix::from_fn(n0, indices.len(), |i, j| {
                let col = h * n0 + i;
                let frame = self.cache.frame_scores[indices[j]][col];
                let pos = self.cache.positional.get(len - 1 - indices[j], col);
                (frame + pos) * scale
            });
            let weights = scores.softmax_rows(None)?;
            outs.push(weights.matmul(&values.slice_cols(h * hw, hw)?)?);
        }
        counters.assembly_adds += (heads * n0 * indices.len()) as u64;
        counters.record_weighted(Site::cross(Region::Stage1), (n0 * indices.len() * c) as u64);

        let refs: Vec<&Matrix<F>> = outs.iter().collect();
        Matrix::concat_cols(&refs)?
            .matmul(self.model.weight(cross.attn.wo))?
            .add_row(self.model.weight(cross.attn.bo))
    }
}

/// Recomputes every prediction from the memory snapshot. Works for every
/// design and serves as the oracle for [`StreamingEngine`].
#[derive(Clone, Debug)]
pub struct ReferenceEngine<F: Real = f64> {
    model: InferenceModel<F>,
    table: PositionalTable<F>,
    memory: MemoryState<F>,
    stride: usize,
    counters: MacCounters,
}

impl<F: Real> ReferenceEngine<F> {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let model: InferenceModel<F> = params.inference();
        let config = model.config();
        let table = PositionalTable::new(config.feature_dim, config.short_len + config.long_len);
        let memory = MemoryState::new(config.feature_dim, config.short_len, config.long_len)?;
        Ok(Self {
            model,
            table,
            memory,
            stride: 1,
            counters: MacCounters::default(),
        })
    }

    pub fn with_stride(mut self, stride: usize) -> Result<Self> {
        downsample_indices(0, stride)?;
        self.stride = stride;
        Ok(self)
    }

    pub fn memory(&self) -> &MemoryState<F> {
        &self.memory
    }

    pub fn last_counters(&self) -> &MacCounters {
        &self.counters
    }

    pub fn step(&mut self, frame: &[F]) -> Result<Prediction<F>> {
        self.memory.push_frame(frame)?;
        let (long, short) = self.memory.snapshot(&self.table)?;
        let long = downsample_long(&long, self.stride)?;
        let (pred, counters) = self.model.predict_counted(&long, &short, true)?;
        self.counters = counters;
        Ok(pred)
    }
}

/// How [`stream_predictions`] computes each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamMode {
    /// Cached stage-1 scores; two-stage models only.
    Cached,
    /// Full recomputation from the memory snapshot; any design.
    Reference,
}

impl StreamMode {
    pub fn name(self) -> &'static str {
        match self {
            StreamMode::Cached => "cached",
            StreamMode::Reference => "reference",
        }
    }
}

impl FromStr for StreamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cached" => Ok(StreamMode::Cached),
            "reference" => Ok(StreamMode::Reference),
            other => Err(Error::Config(format!(
                "unknown mode `{other}`, expected cached or reference"
            ))),
        }
    }
}

/// Streams every row of `frames` in order and records the newest-position
/// probabilities of each step, computed in precision `F`.
pub fn stream_predictions<F: Real>(
    params: &ModelParams,
    frames: &Matrix<f32>,
    mode: StreamMode,
    stride: usize,
) -> Result<PredictionDump> {
    let config = params.config();
    if frames.rows() > 0 && frames.cols() != config.feature_dim {
        return Err(Error::FrameWidth {
            expected: config.feature_dim,
            got: frames.cols(),
        });
    }
    enum Engine<F: Real> {
        Cached(Box<StreamingEngine<F>>),
        Reference(Box<ReferenceEngine<F>>),
    }
    let mut engine = match mode {
        StreamMode::Cached => Engine::Cached(Box::new(StreamingEngine::new(params)?.with_stride(stride)?)),
        StreamMode::Reference => {
            Engine::Reference(Box::new(ReferenceEngine::new(params)?.with_stride(stride)?))
        }
    };
    let mut frame = vec![F::zero(); frames.cols()];
    let mut steps = Vec::with_capacity(frames.rows());
    let mut scores = Vec::with_capacity(frames.rows() * config.outputs());
    for t in 0..frames.rows() {
        for (dst, &src) in frame.iter_mut().zip(frames.row(t)) {
            *dst = F::of(src as f64);
        }
        let pred = match &mut engine {
            Engine::Cached(e) => e.step(&frame)?,
            Engine::Reference(e) => e.step(&frame)?,
        };
        let step = u32::try_from(t).map_err(|_| Error::format("prediction dump", "too many steps"))?;
        steps.push(step);
        scores.extend(pred.newest().iter().map(|p| p.as_f64() as f32));
    }
    Ok(PredictionDump {
        scores: Matrix::new(steps.len(), config.outputs(), scores)?,
        steps,
    })
}

/// Largest elementwise relative difference `|a − b| / max(|a|, |b|)`
/// (zero where both are zero).
pub fn max_relative_difference<F: Real>(a: &[F], b: &[F]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            let denom = x.abs().max(y.abs());
            if denom == 0.0 {
                0.0
            } else {
                (x - y).abs() / denom
            }
        })
        .fold(0.0, f64::max)
}
