use std::sync::Arc;

use super::matrix::{Matrix, Real};
use crate::attention::AttentionMask;
use crate::error::Result;
use crate::model::MacCounters;
use crate::params::ParamId;

/// A builder of dense computations. Model code is written once against
/// this trait and runs either eagerly ([`Eval`]) or recorded for
/// differentiation ([`super::Tape`]).
pub trait Graph {
    type Scalar: Real;
    type Node: Clone;

    fn param(&mut self, id: ParamId) -> Self::Node;
    fn input(&mut self, value: Matrix<Self::Scalar>) -> Self::Node;
    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Matrix<Self::Scalar>;

    fn matmul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    /// `a · bᵀ`
    fn matmul_nt(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn add_row(&mut self, a: &Self::Node, bias: &Self::Node) -> Result<Self::Node>;
    fn scale(&mut self, a: &Self::Node, s: f64) -> Self::Node;
    fn relu(&mut self, a: &Self::Node) -> Self::Node;
    fn softmax_rows(&mut self, a: &Self::Node, mask: Option<&AttentionMask>) -> Result<Self::Node>;
    fn layer_norm(
        &mut self,
        x: &Self::Node,
        gain: &Self::Node,
        bias: &Self::Node,
        eps: f64,
    ) -> Result<Self::Node>;
    fn slice_cols(&mut self, a: &Self::Node, start: usize, len: usize) -> Result<Self::Node>;
    fn slice_rows(&mut self, a: &Self::Node, start: usize, len: usize) -> Result<Self::Node>;
    fn concat_cols(&mut self, parts: &[Self::Node]) -> Result<Self::Node>;
    fn concat_rows(&mut self, parts: &[Self::Node]) -> Result<Self::Node>;
    fn mean_rows(&mut self, a: &Self::Node) -> Self::Node;
    /// `Σ_r −ln(max(p[r, labels[r]], 1e-12))` as a `1 × 1` node.
    fn nll(&mut self, probs: &Self::Node, labels: &[usize]) -> Result<Self::Node>;

    fn counters_mut(&mut self) -> &mut MacCounters;

    fn shape(&self, node: &Self::Node) -> (usize, usize) {
        self.value(node).shape()
    }
}

/// Smallest probability the log-likelihood is evaluated at.
pub const PROB_FLOOR: f64 = 1e-12;

/// Eager evaluation without gradient bookkeeping.
pub struct Eval<'w, F: Real> {
    weights: &'w [Arc<Matrix<F>>],
    counters: MacCounters,
}

impl<'w, F: Real> Eval<'w, F> {
    pub fn new(weights: &'w [Arc<Matrix<F>>]) -> Self {
        Self {
            weights,
            counters: MacCounters::default(),
        }
    }

    pub fn counters(&self) -> &MacCounters {
        &self.counters
    }

    pub fn into_counters(self) -> MacCounters {
        self.counters
    }
}

impl<F: Real> Graph for Eval<'_, F> {
    type Scalar = F;
    type Node = Arc<Matrix<F>>;

    fn param(&mut self, id: ParamId) -> Self::Node {
        Arc::clone(&self.weights[id.index()])
    }

    fn input(&mut self, value: Matrix<F>) -> Self::Node {
        Arc::new(value)
    }

    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Matrix<F> {
        node
    }

    fn matmul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        Ok(Arc::new(a.matmul(b)?))
    }

    fn matmul_nt(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        Ok(Arc::new(a.matmul_nt(b)?))
    }

    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        Ok(Arc::new(a.add(b)?))
    }

    fn add_row(&mut self, a: &Self::Node, bias: &Self::Node) -> Result<Self::Node> {
        Ok(Arc::new(a.add_row(bias)?))
    }

    fn scale(&mut self, a: &Self::Node, s: f64) -> Self::Node {
        Arc::new(a.scale(F::of(s)))
    }

    fn relu(&mut self, a: &Self::Node) -> Self::Node {
        Arc::new(a.relu())
    }

    fn softmax_rows(&mut self, a: &Self::Node, mask: Option<&AttentionMask>) -> Result<Self::Node> {
        Ok(Arc::new(a.softmax_rows(mask)?))
    }

    fn layer_norm(
        &mut self,
        x: &Self::Node,
        gain: &Self::Node,
        bias: &Self::Node,
        eps: f64,
    ) -> Result<Self::Node> {
        Ok(Arc::new(x.layer_norm(gain, bias, F::of(eps))?))
    }

    fn slice_cols(&mut self, a: &Self::Node, start: usize, len: usize) -> Result<Self::Node> {
        Ok(Arc::new(a.slice_cols(start, len)?))
    }

    fn slice_rows(&mut self, a: &Self::Node, start: usize, len: usize) -> Result<Self::Node> {
        Ok(Arc::new(a.slice_rows(start, len)?))
    }

    fn concat_cols(&mut self, parts: &[Self::Node]) -> Result<Self::Node> {
        let refs: Vec<&Matrix<F>> = parts.iter().map(|p| p.as_ref()).collect();
        Ok(Arc::new(Matrix::concat_cols(&refs)?))
    }

    fn concat_rows(&mut self, parts: &[Self::Node]) -> Result<Self::Node> {
        let refs: Vec<&Matrix<F>> = parts.iter().map(|p| p.as_ref()).collect();
        Ok(Arc::new(Matrix::concat_rows(&refs)?))
    }

    fn mean_rows(&mut self, a: &Self::Node) -> Self::Node {
        Arc::new(a.mean_rows())
    }

    fn nll(&mut self, probs: &Self::Node, labels: &[usize]) -> Result<Self::Node> {
        let total = nll_value(probs, labels)?;
        Ok(Arc::new(Matrix::filled(1, 1, total)))
    }

    fn counters_mut(&mut self) -> &mut MacCounters {
        &mut self.counters
    }
}

pub(crate) fn nll_value<F: Real>(probs: &Matrix<F>, labels: &[usize]) -> Result<F> {
    if labels.len() != probs.rows() || labels.iter().any(|&y| y >= probs.cols()) {
        return Err(crate::error::Error::shape(
            "nll",
            probs.shape(),
            (labels.len(), labels.iter().copied().max().unwrap_or(0) + 1),
        ));
    }
    let floor = F::of(PROB_FLOOR);
    Ok(labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs.get(r, y).max(floor).ln())
        .sum())
}
