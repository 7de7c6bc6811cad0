//! Window sampling, the per-position loss and the optimization loop.
//!
//! Each sampled window is an independent example: the model sees the long
//! and short views that a stream would hold at that step and is supervised
//! on every short-term position through the directional decoder mask.

mod optim;
mod synthetic;
mod window;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{learning_rate, AdamW};
pub use synthetic::SyntheticTask;
pub use window::{sample_window, window_at, Window};

use crate::error::{Error, Result};
use crate::memory::PositionalTable;
use crate::model::{argmax, ModelConfig, ModelParams, Prediction};
use crate::numerics::{Graph, Matrix, Real, Tape};

/// Per-step features and class ids of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledSequence {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "LabeledSequence",
                features.shape(),
                (labels.len(), features.cols()),
            ));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rejects labels above `classes` (class 0 is background).
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().position(|&y| y > classes) {
            Some(step) => Err(Error::LabelOutOfRange {
                step,
                label: self.labels[step],
                max: classes,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    /// Fraction of all iterations spent warming the learning rate up.
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Windows drawn per epoch. `None` visits every valid window end of
    /// every sequence once per epoch, in shuffled order.
    #[serde(default)]
    pub windows_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 25,
            peak_lr: 5e-5,
            weight_decay: 5e-5,
            warmup_fraction: 0.4,
            seed: 0,
            windows_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.epochs == 0 {
            return fail("epochs must be positive");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return fail("peak_lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be non-negative");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return fail("warmup_fraction must lie in (0, 1)");
        }
        if self.windows_per_epoch == Some(0) {
            return fail("windows_per_epoch must be positive");
        }
        Ok(())
    }
}

/// `Σ_t −ln max(p_t[y_t], 1e-12)` over the predicted positions.
pub fn sequence_loss<F: Real>(pred: &Prediction<F>, labels: &[usize]) -> Result<f64> {
    crate::numerics::graph_nll(pred.probs(), labels).map(|v| v.as_f64())
}

/// Labels a prediction is scored against: all positions, or only the
/// newest one when the model predicts a single row.
pub(crate) fn target_labels(rows: usize, labels: &[usize]) -> &[usize] {
    &labels[labels.len() - rows.min(labels.len())..]
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-window loss `L_T`.
    pub mean_loss: f64,
    /// Newest-frame accuracy over the epoch's training windows, measured
    /// before each update.
    pub accuracy: f64,
    pub final_lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// Tab-separated per-epoch table.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tloss\taccuracy\tlr\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.4}\t{:.3e}\n",
                e.epoch, e.mean_loss, e.accuracy, e.final_lr
            ));
        }
        out
    }
}

/// Loss and parameter gradients of one window.
pub struct WindowGradient {
    pub loss: f64,
    pub newest_correct: bool,
    pub grads: Vec<Matrix>,
}

pub fn window_gradient(params: &ModelParams, window: &Window) -> Result<WindowGradient> {
    let mut tape = Tape::with_params(params.store());
    let long = tape.input(window.long.clone());
    let short = tape.input(window.short.clone());
    let probs = params.layout().forward(&mut tape, &long, &short, true)?;
    let rows = tape.shape(&probs).0;
    let newest = argmax(tape.value(&probs).row(rows - 1));
    let labels = target_labels(rows, &window.labels);
    let loss = tape.nll(&probs, labels)?;
    let value = tape.value(&loss).get(0, 0);
    let grads = tape.backward(loss);
    Ok(WindowGradient {
        loss: value,
        newest_correct: newest == *window.labels.last().expect("non-empty window"),
        grads: tape.param_grads(&grads),
    })
}

/// Worker threads for data-parallel work: `LSTR_THREADS` when set and
/// positive, otherwise rayon's default.
pub fn thread_count() -> usize {
    std::env::var("LSTR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

pub(crate) fn thread_pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Trains fresh parameters. Deterministic given `config.seed`, whatever the
/// thread count.
pub fn fit(
    dataset: &[LabeledSequence],
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<(ModelParams, History)> {
    let params = ModelParams::init(model_config, config.seed)?;
    fit_from(params, dataset, config, |_| {})
}

/// Trains `params` in place, reporting each finished epoch.
pub fn fit_from(
    mut params: ModelParams,
    dataset: &[LabeledSequence],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(ModelParams, History)> {
    config.validate()?;
    let model_config = params.config().clone();
    if dataset.is_empty() {
        return Err(Error::Config("training needs at least one sequence".into()));
    }
    for seq in dataset {
        seq.check_labels(model_config.classes)?;
        if seq.features.cols() != model_config.feature_dim {
            return Err(Error::FrameWidth {
                expected: model_config.feature_dim,
                got: seq.features.cols(),
            });
        }
        if seq.len() < model_config.short_len {
            return Err(Error::SequenceTooShort {
                len: seq.len(),
                needed: model_config.short_len,
            });
        }
    }

    let table = PositionalTable::new(
        model_config.feature_dim,
        model_config.short_len + model_config.long_len,
    );
    let all_ends: Vec<(usize, usize)> = dataset
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (model_config.short_len..=seq.len()).map(move |e| (s, e)))
        .collect();
    let per_epoch = config.windows_per_epoch.unwrap_or(all_ends.len());
    let iters_per_epoch = per_epoch.div_ceil(config.batch_size);
    let total = iters_per_epoch * config.epochs;

    let pool = thread_pool()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_da7a);
    let mut opt = AdamW::new(params.store());
    let mut history = History::default();
    let mut last_good = params.clone();
    let mut iteration = 0;

    for epoch in 0..config.epochs {
        let ends: Vec<(usize, usize)> = match config.windows_per_epoch {
            None => {
                let mut e = all_ends.clone();
                e.shuffle(&mut rng);
                e
            }
            Some(n) => (0..n)
                .map(|_| {
                    let s = rng.random_range(0..dataset.len());
                    (s, rng.random_range(model_config.short_len..=dataset[s].len()))
                })
                .collect(),
        };
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let mut lr = 0.0;
        for batch in ends.chunks(config.batch_size) {
            let windows = batch
                .iter()
                .map(|&(s, e)| window_at(&dataset[s], e, &model_config, &table, 1))
                .collect::<Result<Vec<_>>>()?;
            let results: Vec<Result<WindowGradient>> =
                pool.install(|| windows.par_iter().map(|w| window_gradient(&params, w)).collect());
            let mut grads: Option<Vec<Matrix>> = None;
            for r in results {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        last_good: Box::new(last_good),
                    });
                }
                loss_sum += r.loss;
                correct += usize::from(r.newest_correct);
                seen += 1;
                match &mut grads {
                    None => grads = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            a.add_assign(g)?;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Matrix> = grads
                .expect("non-empty batch")
                .into_iter()
                .map(|g| g.scale(scale))
                .collect();
            lr = learning_rate(config.peak_lr, config.warmup_fraction, iteration, total);
            opt.step(params.store_mut(), &grads, lr, config.weight_decay);
            iteration += 1;
            if !params.store().is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            final_lr: lr,
        };
        on_epoch(&stats);
        history.epochs.push(stats);
        last_good = params.clone();
    }
    Ok((params, history))
}

/// Newest-frame accuracy over every window end whose newest label passes
/// `include`, with the long view downsampled by `stride`.
pub fn newest_frame_accuracy(
    params: &ModelParams,
    dataset: &[LabeledSequence],
    stride: usize,
    include: impl Fn(usize) -> bool + Sync,
) -> Result<f64> {
    let config = params.config();
    let table = PositionalTable::new(config.feature_dim, config.short_len + config.long_len);
    let model = params.inference::<f64>();
    let ends: Vec<(usize, usize)> = dataset
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| {
            (config.short_len..=seq.len())
                .filter(|&e| include(seq.labels[e - 1]))
                .map(move |e| (s, e))
        })
        .collect();
    if ends.is_empty() {
        return Err(Error::Config("no window matches the evaluation filter".into()));
    }
    let pool = thread_pool()?;
    let hits: Vec<Result<bool>> = pool.install(|| {
        ends.par_iter()
            .map(|&(s, e)| {
                let w = window_at(&dataset[s], e, config, &table, stride)?;
                let pred = model.predict(&w.long, &w.short, true)?;
                Ok(pred.newest_class() == dataset[s].labels[e - 1])
            })
            .collect()
    });
    let mut correct = 0;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / ends.len() as f64)
}

#[cfg(test)]
mod tests;
