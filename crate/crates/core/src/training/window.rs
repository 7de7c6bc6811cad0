use rand::Rng;

use super::LabeledSequence;
use crate::error::{Error, Result};
use crate::memory::{downsample_long, PositionalTable};
use crate::model::ModelConfig;
use crate::numerics::Matrix;

/// One training example: memory views ending at some step plus the labels
/// of the short-term positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// Number of frames consumed; the newest frame is `end - 1`.
    pub end: usize,
    pub long: Matrix,
    pub short: Matrix,
    pub labels: Vec<usize>,
}

/// The views a stream would hold after consuming `end` frames, with
/// positional encodings added and the long view downsampled by `stride`.
pub fn window_at(
    seq: &LabeledSequence,
    end: usize,
    config: &ModelConfig,
    table: &PositionalTable,
    stride: usize,
) -> Result<Window> {
    let ms = config.short_len;
    if end < ms || end > seq.len() {
        return Err(Error::SequenceTooShort {
            len: seq.len(),
            needed: end.max(ms),
        });
    }
    if table.len() < ms + config.long_len || table.width() != seq.features.cols() {
        return Err(Error::shape(
            "window_at",
            (ms + config.long_len, seq.features.cols()),
            (table.len(), table.width()),
        ));
    }
    let encode = |start: usize, stop: usize| {
        let rows: Vec<Vec<f64>> = (start..stop)
            .map(|j| {
                let tau = end - 1 - j;
                seq.features
                    .row(j)
                    .iter()
                    .zip(table.get(tau))
                    .map(|(f, s)| f + s)
                    .collect()
            })
            .collect();
        Matrix::from_rows(seq.features.cols(), &rows)
    };
    let long_start = end.saturating_sub(ms + config.long_len);
    let long = downsample_long(&encode(long_start, end - ms)?, stride)?;
    Ok(Window {
        end,
        long,
        short: encode(end - ms, end)?,
        labels: seq.labels[end - ms..end].to_vec(),
    })
}

/// Draws the window end uniformly from `[m_S, len]`.
pub fn sample_window<R: Rng + ?Sized>(
    seq: &LabeledSequence,
    config: &ModelConfig,
    table: &PositionalTable,
    rng: &mut R,
) -> Result<Window> {
    if seq.len() < config.short_len {
        return Err(Error::SequenceTooShort {
            len: seq.len(),
            needed: config.short_len,
        });
    }
    let end = rng.random_range(config.short_len..=seq.len());
    window_at(seq, end, config, table, 1)
}
