//! Long- and short-term FIFO memories with relative sinusoidal encodings.
//!
//! Every incoming frame enters the short-term queue. Once that queue holds
//! more than `m_S` frames the oldest one graduates into the long-term
//! queue, which in turn drops frames older than `m_S + m_L` steps. A frame
//! at relative age `τ` (the newest has `τ = 0`) is read back as
//! `f + s_τ`, so encodings move with the frame as time advances.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

/// Sinusoidal encodings `s_τ` for `τ ∈ [0, len)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalTable<F: Real = f64> {
    table: Matrix<F>,
}

impl<F: Real> PositionalTable<F> {
    /// `s_τ[2i] = sin(τ / 10000^(2i/C))`, `s_τ[2i+1] = cos(τ / 10000^(2i/C))`.
    pub fn new(width: usize, len: usize) -> Self {
        let table = Matrix::from_fn(len, width, |tau, d| {
            let pair = (d / 2) as f64;
            let angle = tau as f64 / 10000f64.powf(2.0 * pair / width as f64);
            F::of(if d % 2 == 0 { angle.sin() } else { angle.cos() })
        });
        Self { table }
    }

    pub fn zeros(width: usize, len: usize) -> Self {
        Self {
            table: Matrix::zeros(len, width),
        }
    }

    #[inline]
    pub fn get(&self, tau: usize) -> &[F] {
        self.table.row(tau)
    }

    pub fn len(&self) -> usize {
        self.table.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.table.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.table.cols()
    }

    pub fn as_matrix(&self) -> &Matrix<F> {
        &self.table
    }
}

/// What happened to the queues on a push.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PushOutcome {
    /// The oldest short-term frame moved into the long-term queue.
    pub graduated: bool,
    /// The oldest long-term frame was discarded.
    pub evicted: bool,
}

#[derive(Clone, Debug)]
pub struct MemoryState<F: Real = f64> {
    width: usize,
    short_len: usize,
    long_len: usize,
    short: VecDeque<Vec<F>>,
    long: VecDeque<Vec<F>>,
    now: u64,
}

impl<F: Real> MemoryState<F> {
    pub fn new(width: usize, short_len: usize, long_len: usize) -> Result<Self> {
        if short_len == 0 {
            return Err(Error::Config("short-term memory needs at least one slot".into()));
        }
        Ok(Self {
            width,
            short_len,
            long_len,
            short: VecDeque::with_capacity(short_len + 1),
            long: VecDeque::with_capacity(long_len + 1),
            now: 0,
        })
    }

    pub fn push_frame(&mut self, frame: &[F]) -> Result<PushOutcome> {
        if frame.len() != self.width {
            return Err(Error::FrameWidth {
                expected: self.width,
                got: frame.len(),
            });
        }
        let mut outcome = PushOutcome::default();
        self.now += 1;
        self.short.push_back(frame.to_vec());
        if self.short.len() > self.short_len {
            let old = self.short.pop_front().expect("non-empty");
            if self.long_len > 0 {
                self.long.push_back(old);
                outcome.graduated = true;
                if self.long.len() > self.long_len {
                    self.long.pop_front();
                    outcome.evicted = true;
                }
            } else {
                outcome.evicted = true;
            }
        }
        Ok(outcome)
    }

    /// Long- and short-term views, oldest row first, each row `f_{T−τ} + s_τ`.
    /// Slots not yet filled are left out rather than zero-padded.
    pub fn snapshot(&self, table: &PositionalTable<F>) -> Result<(Matrix<F>, Matrix<F>)> {
        if self.short.is_empty() {
            return Err(Error::EmptyMemory);
        }
        if table.width() != self.width || table.len() < self.short_len + self.long.len() {
            return Err(Error::shape(
                "snapshot",
                (self.short_len + self.long_len, self.width),
                (table.len(), table.width()),
            ));
        }
        let encode = |frames: &VecDeque<Vec<F>>, newest_tau: usize| {
            let n = frames.len();
            let mut data = Vec::with_capacity(n * self.width);
            for (i, f) in frames.iter().enumerate() {
                let tau = newest_tau + (n - 1 - i);
                data.extend(f.iter().zip(table.get(tau)).map(|(a, b)| *a + *b));
            }
            Matrix::new(n, self.width, data).expect("consistent shape")
        };
        Ok((encode(&self.long, self.short_len), encode(&self.short, 0)))
    }

    /// Raw long-term frames, oldest first.
    pub fn long_frames(&self) -> impl ExactSizeIterator<Item = &[F]> + DoubleEndedIterator {
        self.long.iter().map(Vec::as_slice)
    }

    /// Raw short-term frames, oldest first.
    pub fn short_frames(&self) -> impl ExactSizeIterator<Item = &[F]> + DoubleEndedIterator {
        self.short.iter().map(Vec::as_slice)
    }

    pub fn long_count(&self) -> usize {
        self.long.len()
    }

    pub fn short_count(&self) -> usize {
        self.short.len()
    }

    /// Number of frames pushed so far; the newest frame has time `now()`.
    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn short_len(&self) -> usize {
        self.short_len
    }

    pub fn long_len(&self) -> usize {
        self.long_len
    }
}

/// Rows kept when downsampling `len` long-term rows (oldest first) with
/// `stride`: every `stride`-th row counting back from the newest.
pub fn downsample_indices(len: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    Ok((0..len)
        .filter(|r| (len - 1 - r).is_multiple_of(stride))
        .collect())
}

pub fn downsample_long<F: Real>(view: &Matrix<F>, stride: usize) -> Result<Matrix<F>> {
    if stride == 1 {
        return Ok(view.clone());
    }
    Ok(view.select_rows(&downsample_indices(view.rows(), stride)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(t: usize, width: usize) -> Vec<f64> {
        (0..width).map(|d| (t * 100 + d) as f64).collect()
    }

    #[test]
    fn first_push_fills_short_only() {
        let mut m = MemoryState::new(3, 4, 8).unwrap();
        m.push_frame(&frame(1, 3)).unwrap();
        assert_eq!((m.short_count(), m.long_count(), m.now()), (1, 0, 1));
    }

    #[test]
    fn graduation_moves_oldest_frame() {
        let mut m = MemoryState::new(3, 4, 8).unwrap();
        for t in 1..=5 {
            let out = m.push_frame(&frame(t, 3)).unwrap();
            assert_eq!(out.graduated, t == 5);
        }
        assert_eq!(m.short_count(), 4);
        assert_eq!(m.long_frames().collect::<Vec<_>>(), vec![frame(1, 3).as_slice()]);
    }

    #[test]
    fn long_queue_matches_list_oracle() {
        let (ms, ml) = (4, 8);
        let mut m = MemoryState::new(2, ms, ml).unwrap();
        let mut all: Vec<Vec<f64>> = Vec::new();
        for t in 1..=ms + ml + 5 {
            m.push_frame(&frame(t, 2)).unwrap();
            all.push(frame(t, 2));
        }
        // Oracle: the long queue is the slice of arrivals aged m_S..m_S+m_L.
        let n = all.len();
        let expected: Vec<&[f64]> = all[n - ms - ml..n - ms].iter().map(Vec::as_slice).collect();
        assert_eq!(m.long_frames().collect::<Vec<_>>(), expected);
        assert_eq!(expected[0], frame(6, 2).as_slice());
        assert_eq!(*expected.last().unwrap(), frame(ml + 5, 2).as_slice());
    }

    #[test]
    fn wrong_width_rejected() {
        let mut m = MemoryState::<f64>::new(3, 2, 2).unwrap();
        assert!(matches!(
            m.push_frame(&[1.0, 2.0]),
            Err(Error::FrameWidth { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn positional_table_formula() {
        let t = PositionalTable::<f64>::new(6, 10);
        assert_eq!(t.get(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let tau = 7.0f64;
        assert_eq!(t.get(7)[0], tau.sin());
        assert_eq!(t.get(7)[3], (tau / 10000f64.powf(2.0 / 6.0)).cos());
        assert_eq!(t.get(7)[4], (tau / 10000f64.powf(4.0 / 6.0)).sin());
    }

    #[test]
    fn single_frame_snapshot() {
        let table = PositionalTable::new(3, 12);
        let mut m = MemoryState::new(3, 4, 8).unwrap();
        m.push_frame(&frame(1, 3)).unwrap();
        let (long, short) = m.snapshot(&table).unwrap();
        assert_eq!(long.rows(), 0);
        let expected: Vec<f64> = frame(1, 3).iter().zip(table.get(0)).map(|(a, b)| a + b).collect();
        assert_eq!(short.row(0), expected.as_slice());

        m.push_frame(&frame(2, 3)).unwrap();
        let (_, short) = m.snapshot(&table).unwrap();
        let shifted: Vec<f64> = frame(1, 3).iter().zip(table.get(1)).map(|(a, b)| a + b).collect();
        assert_eq!(short.row(0), shifted.as_slice());
    }

    #[test]
    fn empty_snapshot_rejected() {
        let m = MemoryState::<f64>::new(3, 4, 8).unwrap();
        assert!(matches!(
            m.snapshot(&PositionalTable::new(3, 12)),
            Err(Error::EmptyMemory)
        ));
    }

    #[test]
    fn snapshot_matches_timestamp_oracle() {
        let (ms, ml, w) = (3, 5, 4);
        let table = PositionalTable::new(w, ms + ml);
        for pushes in [1, 2, 3, 4, 6, 8, 9, 20] {
            let mut m = MemoryState::new(w, ms, ml).unwrap();
            for t in 1..=pushes {
                m.push_frame(&frame(t, w)).unwrap();
            }
            let (long, short) = m.snapshot(&table).unwrap();
            // Oracle: recompute each retained frame's time and age directly.
            let now = pushes;
            let first_short = now.saturating_sub(ms) + 1;
            let first_long = now.saturating_sub(ms + ml) + 1;
            let mut expect_short = Vec::new();
            for t in first_short..=now {
                let tau = now - t;
                expect_short.push(
                    frame(t, w)
                        .iter()
                        .zip(table.get(tau))
                        .map(|(a, b)| a + b)
                        .collect::<Vec<_>>(),
                );
            }
            let mut expect_long = Vec::new();
            for t in first_long..first_short {
                let tau = now - t;
                expect_long.push(
                    frame(t, w)
                        .iter()
                        .zip(table.get(tau))
                        .map(|(a, b)| a + b)
                        .collect::<Vec<_>>(),
                );
            }
            assert_eq!(
                short,
                Matrix::from_rows(w, &expect_short).unwrap(),
                "pushes={pushes}"
            );
            assert_eq!(
                long,
                Matrix::from_rows(w, &expect_long).unwrap(),
                "pushes={pushes}"
            );
        }
    }

    #[test]
    fn downsample_fixtures() {
        let view = Matrix::from_fn(10, 1, |r, _| r as f64);
        assert_eq!(downsample_long(&view, 1).unwrap(), view);
        let kept = downsample_long(&view, 3).unwrap();
        assert_eq!(kept.data(), &[0.0, 3.0, 6.0, 9.0]);
        assert_eq!(downsample_indices(2048, 128).unwrap().len(), 16);
        assert!(downsample_indices(4, 0).is_err());
    }

    proptest! {
        #[test]
        fn retention_bound_and_order(ms in 1usize..6, ml in 0usize..10, pushes in 0usize..40) {
            let mut m = MemoryState::new(1, ms, ml).unwrap();
            for t in 1..=pushes {
                m.push_frame(&[t as f64]).unwrap();
                prop_assert!(m.short_count() + m.long_count() <= ms + ml);
            }
            let times: Vec<f64> = m.long_frames().chain(m.short_frames()).map(|f| f[0]).collect();
            prop_assert!(times.windows(2).all(|w| w[1] == w[0] + 1.0));
            if let Some(last) = times.last() {
                prop_assert_eq!(*last, pushes as f64);
            }
        }

        #[test]
        fn snapshot_is_pure(ms in 1usize..5, ml in 0usize..6, pushes in 1usize..20) {
            let table = PositionalTable::new(2, ms + ml);
            let mut m = MemoryState::new(2, ms, ml).unwrap();
            for t in 1..=pushes {
                m.push_frame(&[t as f64, -(t as f64)]).unwrap();
            }
            prop_assert_eq!(m.snapshot(&table).unwrap(), m.snapshot(&table).unwrap());
        }
    }
}
