//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation appends a node holding its forward value and the
//! identifiers of its inputs. Nodes are only ever appended after their
//! inputs, so walking the node list backwards is a reverse topological
//! order and `backward` needs no sorting.

use std::fmt;

use super::graph::{nll_value, Graph, PROB_FLOOR};
use super::matrix::Matrix;
use crate::attention::AttentionMask;
use crate::error::{Error, Result};
use crate::model::MacCounters;
use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations that carry a backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    MatMulNt,
    Add,
    AddRow,
    Scale,
    Relu,
    Softmax,
    LayerNorm,
    SliceCols,
    SliceRows,
    ConcatCols,
    ConcatRows,
    MeanRows,
    Nll,
    Sum,
    WeightedSum,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::MatMul,
        OpKind::MatMulNt,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::SliceCols,
        OpKind::SliceRows,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::MeanRows,
        OpKind::Nll,
        OpKind::Sum,
        OpKind::WeightedSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::SliceCols => "slice_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::MeanRows => "mean_rows",
            OpKind::Nll => "nll",
            OpKind::Sum => "sum",
            OpKind::WeightedSum => "weighted_sum",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Nll(Var, Vec<usize>),
    Sum(Var),
    WeightedSum(Var, Matrix),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Nll(..) => OpKind::Nll,
            Op::Sum(..) => OpKind::Sum,
            Op::WeightedSum(..) => OpKind::WeightedSum,
        })
    }
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded computation in 64-bit precision.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
    counters: MacCounters,
    fault: Option<OpKind>,
}

/// Gradient buffers indexed by [`Var`]. Nodes the output does not depend
/// on have no buffer.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape if the output does not
    /// depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers every parameter of `store` as a leaf, in store order.
    pub fn with_params(store: &ParamStore) -> Self {
        let mut tape = Self::new();
        tape.params = store.iter().map(|(_, m)| tape.leaf(m.clone())).collect();
        tape
    }

    /// Scales the backward rule of `kind` by 1.5. Mutation-testing hook for
    /// the gradient checker; never set in normal use.
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Uses existing leaves as the parameters, in store order.
    pub fn set_param_vars(&mut self, vars: Vec<Var>) {
        self.params = vars;
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a))
    }

    /// `Σ w ∘ a` as a `1 × 1` node.
    pub fn weighted_sum(&mut self, a: Var, weights: Matrix) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.shape() != weights.shape() {
            return Err(Error::shape("weighted_sum", v.shape(), weights.shape()));
        }
        let s: f64 = v.data().iter().zip(weights.data()).map(|(x, w)| x * w).sum();
        Ok(self.push(Matrix::filled(1, 1, s), Op::WeightedSum(a, weights)))
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Which side of each non-differentiable point the recorded values sit
    /// on: the sign of every relu input and whether each scored probability
    /// clears the floor. Two evaluations with equal patterns lie on the same
    /// smooth piece.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => pattern.extend(self.val(*a).data().iter().map(|&x| x > 0.0)),
                Op::Nll(p, labels) => {
                    let probs = self.val(*p);
                    pattern.extend(
                        labels
                            .iter()
                            .enumerate()
                            .map(|(t, &y)| probs.get(t, y) > PROB_FLOOR),
                    );
                }
                _ => {}
            }
        }
        pattern
    }

    /// Back-propagates from `root` (seeded with ones) through every node
    /// in reverse recording order.
    pub fn backward(&self, root: Var) -> Gradients {
        let (r, c) = self.val(root).shape();
        self.backward_from(root, Matrix::filled(r, c, 1.0))
            .expect("seed shape matches root")
    }

    /// Back-propagates the upstream gradient `seed` of `root`, which is the
    /// gradient of `Σ seed ∘ root`.
    pub fn backward_from(&self, root: Var, seed: Matrix) -> Result<Gradients> {
        if seed.shape() != self.val(root).shape() {
            return Err(Error::shape(
                "backward_from",
                self.val(root).shape(),
                seed.shape(),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let Some(mut upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if self.fault.is_some() && node.op.kind() == self.fault {
                upstream = upstream.scale(1.5);
            }
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, g: Matrix| match &mut grads[v.0] {
            Some(existing) => existing
                .add_assign(&g)
                .expect("gradient shape matches forward value"),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, dy.matmul_nt(self.val(*b)).expect("matmul backward"));
                acc(*b, self.val(*a).transpose().matmul(dy).expect("matmul backward"));
            }
            Op::MatMulNt(a, b) => {
                acc(*a, dy.matmul(self.val(*b)).expect("matmul_nt backward"));
                acc(
                    *b,
                    dy.transpose().matmul(self.val(*a)).expect("matmul_nt backward"),
                );
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.col_sums());
            }
            Op::Scale(a, s) => acc(*a, dy.scale(*s)),
            Op::Relu(a) => {
                let x = self.val(*a);
                let mut g = dy.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                acc(*a, g);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    let inner: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                    for (o, (p, d)) in g.row_mut(r).iter_mut().zip(yr.iter().zip(dr)) {
                        *o = p * (d - inner);
                    }
                }
                acc(*a, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.val(*gain);
                let n = xhat.cols() as f64;
                let mut dx = Matrix::zeros(xhat.rows(), xhat.cols());
                let mut dgain = Matrix::zeros(1, xhat.cols());
                for (r, &inv) in inv_std.iter().enumerate() {
                    let h = xhat.row(r);
                    let d = dy.row(r);
                    let dh: Vec<f64> = d.iter().zip(gv.data()).map(|(d, g)| d * g).collect();
                    let mean_dh = dh.iter().sum::<f64>() / n;
                    let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..xhat.cols() {
                        dx.set(r, c, inv * (dh[c] - mean_dh - h[c] * mean_dh_h));
                        dgain.data_mut()[c] += d[c] * h[c];
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dy.col_sums());
            }
            Op::SliceCols(a, start) => {
                let src = self.val(*a);
                let mut g = Matrix::zeros(src.rows(), src.cols());
                for r in 0..dy.rows() {
                    g.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                }
                acc(*a, g);
            }
            Op::SliceRows(a, start) => {
                let src = self.val(*a);
                let mut g = Matrix::zeros(src.rows(), src.cols());
                for r in 0..dy.rows() {
                    g.row_mut(*start + r).copy_from_slice(dy.row(r));
                }
                acc(*a, g);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    acc(*p, dy.slice_cols(offset, w).expect("concat_cols backward"));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.val(*p).rows();
                    let idx: Vec<usize> = (offset..offset + h).collect();
                    acc(*p, dy.select_rows(&idx));
                    offset += h;
                }
            }
            Op::MeanRows(a) => {
                let src = self.val(*a);
                let n = src.rows() as f64;
                acc(
                    *a,
                    Matrix::from_fn(src.rows(), src.cols(), |_, c| dy.get(0, c) / n),
                );
            }
            Op::Nll(p, labels) => {
                let probs = self.val(*p);
                let mut g = Matrix::zeros(probs.rows(), probs.cols());
                for (r, &y) in labels.iter().enumerate() {
                    let pv = probs.get(r, y);
                    if pv > PROB_FLOOR {
                        g.set(r, y, -dy.get(0, 0) / pv);
                    }
                }
                acc(*p, g);
            }
            Op::Sum(a) => {
                let (r, c) = self.val(*a).shape();
                acc(*a, Matrix::filled(r, c, dy.get(0, 0)));
            }
            Op::WeightedSum(a, w) => acc(*a, w.scale(dy.get(0, 0))),
        }
    }

    /// Gradients for every registered parameter, in store order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Matrix> {
        self.params
            .iter()
            .map(|&v| grads.get_or_zeros(v, self.val(v).shape()))
            .collect()
    }

    pub fn counters(&self) -> &MacCounters {
        &self.counters
    }
}

impl Graph for Tape {
    type Scalar = f64;
    type Node = Var;

    fn param(&mut self, id: ParamId) -> Var {
        self.params[id.index()]
    }

    fn input(&mut self, value: Matrix) -> Var {
        self.leaf(value)
    }

    fn value<'a>(&'a self, node: &'a Var) -> &'a Matrix {
        self.val(*node)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).matmul(self.val(*b))?;
        Ok(self.push(v, Op::MatMul(*a, *b)))
    }

    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).matmul_nt(self.val(*b))?;
        Ok(self.push(v, Op::MatMulNt(*a, *b)))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).add(self.val(*b))?;
        Ok(self.push(v, Op::Add(*a, *b)))
    }

    fn add_row(&mut self, a: &Var, bias: &Var) -> Result<Var> {
        let v = self.val(*a).add_row(self.val(*bias))?;
        Ok(self.push(v, Op::AddRow(*a, *bias)))
    }

    fn scale(&mut self, a: &Var, s: f64) -> Var {
        let v = self.val(*a).scale(s);
        self.push(v, Op::Scale(*a, s))
    }

    fn relu(&mut self, a: &Var) -> Var {
        let v = self.val(*a).relu();
        self.push(v, Op::Relu(*a))
    }

    fn softmax_rows(&mut self, a: &Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let v = self.val(*a).softmax_rows(mask)?;
        Ok(self.push(v, Op::Softmax(*a)))
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let (v, xhat, inv_std) = self
            .val(*x)
            .layer_norm_parts(self.val(*gain), self.val(*bias), eps)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x: *x,
                gain: *gain,
                bias: *bias,
                xhat,
                inv_std,
            },
        ))
    }

    fn slice_cols(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let v = self.val(*a).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols(*a, start)))
    }

    fn slice_rows(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let v = self.val(*a).slice_rows(start, len)?;
        Ok(self.push(v, Op::SliceRows(*a, start)))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Matrix> = parts.iter().map(|p| self.val(*p)).collect();
        let v = Matrix::concat_cols(&refs)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Matrix> = parts.iter().map(|p| self.val(*p)).collect();
        let v = Matrix::concat_rows(&refs)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    fn mean_rows(&mut self, a: &Var) -> Var {
        let v = self.val(*a).mean_rows();
        self.push(v, Op::MeanRows(*a))
    }

    fn nll(&mut self, probs: &Var, labels: &[usize]) -> Result<Var> {
        let total = nll_value(self.val(*probs), labels)?;
        Ok(self.push(Matrix::filled(1, 1, total), Op::Nll(*probs, labels.to_vec())))
    }

    fn counters_mut(&mut self) -> &mut MacCounters {
        &mut self.counters
    }
}
