//! Per-frame ranking metrics: average precision, calibrated average
//! precision and the per-decile breakdown over action instances.
//!
//! Frames are ranked by descending score with ties kept in original order.
//! Score matrices hold one row per step; column 0 is background and columns
//! `1..` are the action classes that enter the class means.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DECILES: usize = 10;

/// Positive flags listed in rank order.
fn ranked(scores: &[f64], positives: &[bool]) -> Result<Vec<bool>> {
    if scores.len() != positives.len() {
        return Err(Error::LengthMismatch {
            what: "positive flags",
            expected: scores.len(),
            got: positives.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore { index });
    }
    if !positives.contains(&true) {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order.into_iter().map(|i| positives[i]).collect())
}

/// Mean of the precision at each positive rank. With `ratio = Some(w)` the
/// precision is calibrated as `TP / (TP + FP / w)`.
///
/// Each quotient is split into its rounded value and the exact remainder,
/// and both are summed with compensation, so small fixtures come out
/// correctly rounded instead of drifting by an ulp.
fn precision_sum(ranked: &[bool], ratio: Option<f64>) -> f64 {
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    let mut add = |x: f64| {
        let t = sum + x;
        carry += if sum.abs() >= x.abs() {
            (sum - t) + x
        } else {
            (x - t) + sum
        };
        sum = t;
    };
    for &positive in ranked {
        if positive {
            tp += 1.0;
            let denom = match ratio {
                Some(w) => tp + fp / w,
                None => tp + fp,
            };
            let q = tp / denom;
            add(q);
            add((-q).mul_add(denom, tp) / denom);
        } else {
            fp += 1.0;
        }
    }
    let q = sum / tp;
    q + ((-q).mul_add(tp, sum) + carry) / tp
}

pub fn per_frame_ap(scores: &[f64], positives: &[bool]) -> Result<f64> {
    Ok(precision_sum(&ranked(scores, positives)?, None))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibratedAp {
    pub value: f64,
    /// Set when there are no negatives, so the ratio is undefined and
    /// `value` is plain AP.
    pub no_negatives: bool,
}

/// Calibrated AP with the ratio taken from the data: negatives / positives.
pub fn calibrated_ap(scores: &[f64], positives: &[bool]) -> Result<CalibratedAp> {
    let order = ranked(scores, positives)?;
    let pos = order.iter().filter(|&&p| p).count();
    let neg = order.len() - pos;
    if neg == 0 {
        return Ok(CalibratedAp {
            value: precision_sum(&order, None),
            no_negatives: true,
        });
    }
    Ok(CalibratedAp {
        value: precision_sum(&order, Some(neg as f64 / pos as f64)),
        no_negatives: false,
    })
}

pub fn calibrated_ap_with_ratio(scores: &[f64], positives: &[bool], ratio: f64) -> Result<f64> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::Config(format!(
            "calibration ratio must be positive, got {ratio}"
        )));
    }
    Ok(precision_sum(&ranked(scores, positives)?, Some(ratio)))
}

/// Decile of step `t` inside `span`: frame `t` falls in the `d`-th tenth.
pub fn decile_of(span: &Range<usize>, t: usize) -> usize {
    (DECILES * (t - span.start) / span.len()).min(DECILES - 1)
}

/// Calibrated AP per decile of instance progress. Decile `d` ranks every
/// negative frame together with the positive frames lying in the `d`-th
/// tenth of their instance. Deciles without positives are `None`.
/// Positive frames outside every span take no part.
pub fn per_decile_cap(
    scores: &[f64],
    positives: &[bool],
    spans: &[Range<usize>],
) -> Result<[Option<f64>; DECILES]> {
    if scores.len() != positives.len() {
        return Err(Error::LengthMismatch {
            what: "positive flags",
            expected: scores.len(),
            got: positives.len(),
        });
    }
    let mut decile = vec![None; scores.len()];
    for span in spans {
        if span.end > scores.len() || span.is_empty() {
            return Err(Error::Config(format!(
                "instance span {span:?} outside 0..{}",
                scores.len()
            )));
        }
        for t in span.clone() {
            decile[t] = Some(decile_of(span, t));
        }
    }
    let mut out = [None; DECILES];
    for (d, slot) in out.iter_mut().enumerate() {
        let (sub_scores, sub_pos): (Vec<f64>, Vec<bool>) = (0..scores.len())
            .filter(|&t| !positives[t] || decile[t] == Some(d))
            .map(|t| (scores[t], positives[t]))
            .unzip();
        *slot = match calibrated_ap(&sub_scores, &sub_pos) {
            Ok(cap) => Some(cap.value),
            Err(Error::NoPositives) => None,
            Err(e) => return Err(e),
        };
    }
    Ok(out)
}

/// Maximal runs of `class` in `labels`.
pub fn instance_spans(labels: &[usize], class: usize) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = None;
    for (t, &y) in labels.iter().enumerate() {
        match (y == class, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                spans.push(s..t);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(s..labels.len());
    }
    spans
}

/// A metric averaged over the action classes that have positives.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMean {
    pub mean: f64,
    /// Indexed by class id minus one; `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    /// Classes whose calibrated value fell back to plain AP.
    pub uncalibrated: Vec<usize>,
}

impl ClassMean {
    pub fn excluded(&self) -> Vec<usize> {
        (1..=self.per_class.len())
            .filter(|&k| self.per_class[k - 1].is_none())
            .collect()
    }
}

fn class_columns(scores: &Matrix, labels: &[usize]) -> Result<()> {
    if scores.rows() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: scores.rows(),
            got: labels.len(),
        });
    }
    if let Some(step) = labels.iter().position(|&y| y >= scores.cols()) {
        return Err(Error::LabelOutOfRange {
            step,
            label: labels[step],
            max: scores.cols().saturating_sub(1),
        });
    }
    Ok(())
}

fn over_classes(
    scores: &Matrix,
    labels: &[usize],
    mut metric: impl FnMut(usize, &[f64], &[bool]) -> Result<f64>,
) -> Result<(Vec<Option<f64>>, f64)> {
    class_columns(scores, labels)?;
    let mut per_class = Vec::new();
    for k in 1..scores.cols() {
        let column: Vec<f64> = (0..scores.rows()).map(|t| scores.get(t, k)).collect();
        let positives: Vec<bool> = labels.iter().map(|&y| y == k).collect();
        per_class.push(match metric(k, &column, &positives) {
            Ok(v) => Some(v),
            Err(Error::NoPositives) => None,
            Err(e) => return Err(e),
        });
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::NoPositives);
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok((per_class, mean))
}

pub fn mean_ap(scores: &Matrix, labels: &[usize]) -> Result<ClassMean> {
    let (per_class, mean) = over_classes(scores, labels, |_, s, p| per_frame_ap(s, p))?;
    Ok(ClassMean {
        mean,
        per_class,
        uncalibrated: Vec::new(),
    })
}

pub fn mean_cap(scores: &Matrix, labels: &[usize]) -> Result<ClassMean> {
    let mut uncalibrated = Vec::new();
    let (per_class, mean) = over_classes(scores, labels, |k, s, p| {
        let cap = calibrated_ap(s, p)?;
        if cap.no_negatives {
            uncalibrated.push(k);
        }
        Ok(cap.value)
    })?;
    Ok(ClassMean {
        mean,
        per_class,
        uncalibrated,
    })
}

/// Per-decile calibrated AP averaged over the classes present in each decile.
pub fn mean_decile_cap(scores: &Matrix, labels: &[usize]) -> Result<[Option<f64>; DECILES]> {
    class_columns(scores, labels)?;
    let mut sums = [(0.0, 0usize); DECILES];
    for k in 1..scores.cols() {
        let column: Vec<f64> = (0..scores.rows()).map(|t| scores.get(t, k)).collect();
        let positives: Vec<bool> = labels.iter().map(|&y| y == k).collect();
        let deciles = per_decile_cap(&column, &positives, &instance_spans(labels, k))?;
        for (acc, v) in sums.iter_mut().zip(deciles) {
            if let Some(v) = v {
                acc.0 += v;
                acc.1 += 1;
            }
        }
    }
    Ok(sums.map(|(sum, n)| (n > 0).then(|| sum / n as f64)))
}
