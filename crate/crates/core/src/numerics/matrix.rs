use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::attention::AttentionMask;
use crate::error::{Error, Result};

/// Scalar type a [`Matrix`] can hold. Implemented for `f32` and `f64`.
pub trait Real: Float + Default + Debug + Sum + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<F = f64> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Debug for Matrix<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols.max(1)))
            .finish()
    }
}

impl<F: Real> Matrix<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, F::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: F) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally sized rows. `cols` is needed for the
    /// zero-row case.
    pub fn from_rows<R: AsRef<[F]>>(cols: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", (1, cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: &[F]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(F::zero(), F::max)
    }

    /// Standard product `self · rhs`. Each output entry accumulates over the
    /// inner index in increasing order.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![F::zero(); n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::shape("matmul_nt", self.shape(), rhs.shape()));
        }
        let (n, m) = (self.rows, rhs.rows);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out.push(dot(a, rhs.row(j)));
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("add", self.shape(), rhs.shape()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| *a + *b).collect(),
        })
    }

    pub fn add_assign(&mut self, rhs: &Self) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("add_assign", self.shape(), rhs.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a = *a + *b;
        }
        Ok(())
    }

    /// Adds a `1 × cols` row to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape("add_row", self.shape(), bias.shape()));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o = *o + b;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(F::zero()))
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    /// Masked entries come out as exactly zero.
    pub fn softmax_rows(&self, mask: Option<&AttentionMask>) -> Result<Self> {
        if let Some(m) = mask {
            if m.shape() != self.shape() {
                return Err(Error::shape("softmax_rows", self.shape(), m.shape()));
            }
        }
        let mut out = Self::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let allowed = |c: usize| mask.is_none_or(|m| m.allows(r, c));
            let row = self.row(r);
            let mut max = F::neg_infinity();
            let mut any = false;
            for (c, &v) in row.iter().enumerate() {
                if allowed(c) {
                    any = true;
                    if v > max || v.is_nan() {
                        max = v;
                    }
                }
            }
            if !any {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let o = out.row_mut(r);
            if !max.is_finite() {
                // Non-finite scores: the result is undefined, not an error.
                o.fill(F::nan());
                continue;
            }
            let mut total = F::zero();
            for (c, &v) in row.iter().enumerate() {
                if allowed(c) {
                    let e = (v - max).exp();
                    o[c] = e;
                    total = total + e;
                }
            }
            for v in o.iter_mut() {
                *v = *v / total;
            }
        }
        Ok(out)
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: F) -> Result<Self> {
        Ok(self.layer_norm_parts(gain, bias, eps)?.0)
    }

    /// Returns `(output, normalized input, 1/std per row)`.
    pub(crate) fn layer_norm_parts(&self, gain: &Self, bias: &Self, eps: F) -> Result<(Self, Self, Vec<F>)> {
        if gain.shape() != (1, self.cols) || bias.shape() != (1, self.cols) {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        let n = F::of(self.cols as f64);
        let mut out = Self::zeros(self.rows, self.cols);
        let mut xhat = Self::zeros(self.rows, self.cols);
        let mut inv_std = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (c, &x) in row.iter().enumerate() {
                let h = (x - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * gain.data[c] + bias.data[c]);
            }
        }
        Ok((out, xhat, inv_std))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.cols {
            return Err(Error::shape("slice_cols", self.shape(), (start, len)));
        }
        Ok(Self::from_fn(self.rows, len, |r, c| self.get(r, start + c)))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows {
            return Err(Error::shape("slice_rows", self.shape(), (start, len)));
        }
        Ok(Self {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        let mut cols = 0;
        for p in parts {
            if p.rows != rows {
                return Err(Error::shape("concat_cols", (rows, cols), p.shape()));
            }
            cols += p.cols;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape("concat_rows", (rows, cols), p.shape()));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn mean_rows(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        if self.rows == 0 {
            return out;
        }
        for r in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(r)) {
                *o = *o + v;
            }
        }
        let n = F::of(self.rows as f64);
        out.map(|v| v / n)
    }

    pub fn col_sums(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(r)) {
                *o = *o + v;
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::new(rows, cols, v.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_fixture() {
        let a = m(2, 2, &[1., 2., 3., 4.]);
        let b = m(2, 2, &[5., 6., 7., 8.]);
        assert_eq!(a.matmul(&b).unwrap(), m(2, 2, &[19., 22., 43., 50.]));
    }

    #[test]
    fn matmul_identity_and_zero() {
        let x = m(2, 2, &[0.3, -1.5, 2.25, 7.0]);
        assert_eq!(Matrix::identity(2).matmul(&x).unwrap(), x);
        assert_eq!(Matrix::zeros(2, 2).matmul(&x).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_rejects_mismatch_with_both_shapes() {
        let err = Matrix::<f64>::zeros(2, 3)
            .matmul(&Matrix::zeros(2, 3))
            .unwrap_err();
        match err {
            Error::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_text(&Matrix::<f64>::zeros(2, 3), &Matrix::zeros(4, 5)).contains("(4, 5)"));
    }

    fn err_text(a: &Matrix, b: &Matrix) -> String {
        a.matmul(b).unwrap_err().to_string()
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 3, 5);
        let b = random(&mut rng, 4, 5);
        let direct = a.matmul(&b.transpose()).unwrap();
        assert!(a.matmul_nt(&b).unwrap().max_abs_diff(&direct) < 1e-15);
    }

    #[test]
    fn matmul_associative_on_random_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random(&mut rng, 8, 8);
            let b = random(&mut rng, 8, 8);
            let c = random(&mut rng, 8, 8);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.data().iter().fold(0.0f64, |s, v| s.max(v.abs()));
            assert!(left.max_abs_diff(&right) <= 1e-10 * scale);
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let s = m(1, 3, &[0., 0., 0.]).softmax_rows(None).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_gap() {
        // Independent evaluation: p0 = 1 / (1 + e^20).
        let expected = 1.0 / (1.0 + 20f64.exp());
        let s = m(1, 2, &[0., 20.]).softmax_rows(None).unwrap();
        assert!((s.get(0, 0) - expected).abs() < 1e-20);
        assert!((expected - 2.061_153_6e-9).abs() < 1e-15);
        assert!((s.get(0, 1) - (1.0 - expected)).abs() < 1e-15);
    }

    #[test]
    fn softmax_non_finite_row_propagates() {
        let m = Matrix::new(2, 2, vec![f64::NAN, 1.0, 0.0, 1.0]).unwrap();
        let s = m.softmax_rows(None).unwrap();
        assert!(s.row(0).iter().all(|v| v.is_nan()));
        assert!((s.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_fully_masked_row_rejected() {
        let mask = AttentionMask::from_fn(2, 2, |r, _| r == 0);
        let err = Matrix::<f64>::zeros(2, 2).softmax_rows(Some(&mask)).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn layer_norm_fixtures() {
        let one = Matrix::filled(1, 3, 1.0);
        let zero = Matrix::zeros(1, 3);
        let out = m(1, 3, &[4., 4., 4.]).layer_norm(&one, &zero, 1e-5).unwrap();
        assert_eq!(out, Matrix::zeros(1, 3));

        let out = m(1, 2, &[-1., 1.])
            .layer_norm(&Matrix::filled(1, 2, 1.0), &Matrix::zeros(1, 2), 0.0)
            .unwrap();
        assert_eq!(out, m(1, 2, &[-1., 1.]));

        // Direct oracle: mean 2, population variance 2/3.
        let expected = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        let out = m(1, 3, &[1., 2., 3.]).layer_norm(&one, &zero, 1e-5).unwrap();
        assert!((out.get(0, 0) + expected).abs() < 1e-12);
        assert!(out.get(0, 1).abs() < 1e-12);
        assert!((out.get(0, 2) - expected).abs() < 1e-12);
        assert!((expected - 1.2247).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(values in proptest::collection::vec(-1e4f64..1e4, 1..40)) {
            let n = values.len();
            let s = Matrix::new(1, n, values).unwrap().softmax_rows(None).unwrap();
            prop_assert!(s.is_finite());
            prop_assert!((s.sum() - 1.0).abs() < 1e-6);
            prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(values in proptest::collection::vec(-50f64..50.0, 1..20), shift in -100f64..100.0) {
            let n = values.len();
            let a = Matrix::new(1, n, values.clone()).unwrap().softmax_rows(None).unwrap();
            let b = Matrix::new(1, n, values.iter().map(|v| v + shift).collect()).unwrap()
                .softmax_rows(None).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }
}
