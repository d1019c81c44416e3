//! Dense kernels for the forward pass.
//!
//! Every reduction runs sequentially over its inner dimension in ascending index
//! order. Parallelism is only ever across independent output rows, so a kernel
//! returns bit-identical results for a given precision regardless of thread count.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::InvalidInput(format!(
                "unknown precision `{s}` (expected f32 or f64)"
            ))),
        }
    }
}

/// Floating-point element type of the forward pass.
pub trait Scalar: Float + Sum + Debug + Default + Send + Sync + 'static {
    const PRECISION: Precision;

    fn from_f64(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_slice(&self, start: usize, end: usize) -> Self {
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_slice(&self, start: usize, end: usize) -> Self {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_row_vector(&mut self, bias: &[T]) {
        debug_assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_mut(self.cols.max(1)) {
            for (x, &b) in row.iter_mut().zip(bias) {
                *x = *x + b;
            }
        }
    }
}

/// `a × b` on the default execution mode.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    matmul_with(Execution::default(), a, b)
}

/// `a × b`. Each output element accumulates `a[i,k]·b[k,j]` for `k = 0, 1, …` in order.
pub fn matmul_with<T: Scalar>(exec: Execution, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    par::for_each_row_mut(exec, &mut out.data, b.cols, |i, out_row| {
        for (k, &aik) in a.row(i).iter().enumerate() {
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o = *o + aik * bkj;
            }
        }
    });
    Ok(out)
}

/// `a × bᵀ`, i.e. row-by-row dot products. Used for the tied output embedding.
pub fn matmul_transposed_with<T: Scalar>(
    exec: Execution,
    a: &Matrix<T>,
    b: &Matrix<T>,
) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_transposed",
            format!("{}x{} times ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    par::for_each_row_mut(exec, &mut out.data, b.rows, |i, out_row| {
        let ai = a.row(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(ai, b.row(j));
        }
    });
    Ok(out)
}

pub(crate) fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

/// Softmax over the first `valid_len` entries; the rest are treated as masked (−∞)
/// and come back as exact zeros.
pub fn masked_softmax_row<T: Scalar>(scores: &[T], valid_len: usize) -> Result<Vec<T>> {
    if valid_len == 0 || valid_len > scores.len() {
        return Err(Error::InvalidInput(format!(
            "softmax valid_len {valid_len} for a row of length {}",
            scores.len()
        )));
    }
    let live = &scores[..valid_len];
    let max = live.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out = vec![T::zero(); scores.len()];
    let mut total = T::zero();
    for (o, &s) in out.iter_mut().zip(live) {
        *o = (s - max).exp();
        total = total + *o;
    }
    for o in &mut out[..valid_len] {
        *o = *o / total;
    }
    Ok(out)
}

/// Elementwise mean and population standard deviation with `eps` inside the root.
pub fn mean_and_scale<T: Scalar>(y: &[T], eps: f64) -> (T, T) {
    let n = T::from_usize(y.len());
    let mean = y.iter().copied().sum::<T>() / n;
    let var = y.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, (var + T::from_f64(eps)).sqrt())
}

/// `(y − m(y)) / s(y) ⊙ c + b`.
pub fn layer_norm<T: Scalar>(y: &[T], c: &[T], b: &[T], eps: f64) -> Result<Vec<T>> {
    if y.is_empty() {
        return Err(Error::InvalidInput("layer_norm of an empty vector".into()));
    }
    if c.len() != y.len() || b.len() != y.len() {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "input {} but gain {} and bias {}",
                y.len(),
                c.len(),
                b.len()
            ),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let (mean, scale) = mean_and_scale(y, eps);
    Ok(y.iter()
        .zip(c.iter().zip(b))
        .map(|(&v, (&ci, &bi))| (v - mean) / scale * ci + bi)
        .collect())
}

/// Tanh-approximated GELU as used by GPT-2 checkpoints.
pub fn gelu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| gelu_scalar(v)).collect()
}

pub(crate) fn gelu_scalar<T: Scalar>(v: T) -> T {
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.044715);
    half * v * (T::one() + (k * (v + c * v * v * v)).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f32> {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_times_m_is_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 3, 5);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn small_hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c: Matrix<f64> = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn zero_times_m_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_matrix(&mut rng, 4, 4);
        let z = matmul(&Matrix::zeros(2, 4), &m).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
        assert!(matmul_transposed_with(Execution::Sequential, &a, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop_on_64x64() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 64, 64);
        let b = random_matrix(&mut rng, 64, 64);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a.cast(), &b.cast());
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!(
                (*x as f64 - y).abs() <= 1e-5 * y.abs().max(1.0),
                "{x} vs {y}"
            );
        }
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 33, 17);
        let b = random_matrix(&mut rng, 17, 9);
        assert_eq!(
            matmul_with(Execution::Sequential, &a, &b).unwrap(),
            matmul_with(Execution::Parallel, &a, &b).unwrap()
        );
        let bt = b.transpose();
        assert_eq!(
            matmul_transposed_with(Execution::Parallel, &a, &bt).unwrap(),
            matmul_with(Execution::Sequential, &a, &b).unwrap()
        );
    }

    #[test]
    fn softmax_examples() {
        let u = masked_softmax_row(&[0.0f64, 0.0, 0.0], 3).unwrap();
        for p in u {
            assert_relative_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let big = masked_softmax_row(&[1000.0f32, 0.0], 2).unwrap();
        assert!(big.iter().all(|p| p.is_finite()));
        assert_relative_eq!(big[0], 1.0);
        assert_relative_eq!(big[1], 0.0);
        let p = masked_softmax_row(&[0.0f64, 3f64.ln()], 2).unwrap();
        assert_relative_eq!(p[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn softmax_mask_zeroes_tail() {
        let p = masked_softmax_row(&[1.0f32, 2.0, 50.0, 80.0], 2).unwrap();
        assert_eq!(&p[2..], &[0.0, 0.0]);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
        assert!(masked_softmax_row(&[1.0f32], 0).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let z = layer_norm(&[2.0f64; 4], &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let y = layer_norm(&[1.0f64, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-5).unwrap();
        assert_relative_eq!(y[0], 1.0, epsilon = 1e-5);
        assert_relative_eq!(y[1], -1.0, epsilon = 1e-5);
        let beta = [0.5f64, -2.0, 3.0];
        assert_eq!(
            layer_norm(&[9.0, -4.0, 1.0], &[0.0; 3], &beta, 1e-5).unwrap(),
            beta.to_vec()
        );
    }

    #[test]
    fn layer_norm_rejects_bad_input() {
        assert!(layer_norm::<f64>(&[], &[], &[], 1e-5).is_err());
        assert!(layer_norm(&[1.0f64, 2.0], &[1.0], &[0.0, 0.0], 1e-5).is_err());
        assert!(layer_norm(&[1.0f64, 2.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(&[0.0f64])[0], 0.0);
        assert_relative_eq!(gelu(&[20.0f64])[0], 20.0, epsilon = 1e-12);
        // 0.5·(1 + tanh(√(2/π)·1.044715)) = 0.841192
        assert_relative_eq!(gelu(&[1.0f64])[0], 0.841_191_990_607_477, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(
            scores in prop::collection::vec(-50.0f32..50.0, 1..40),
            cut in 0usize..40,
        ) {
            let valid = cut % scores.len() + 1;
            let p = masked_softmax_row(&scores, valid).unwrap();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            let s: f64 = p.iter().map(|&x| x as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }

        #[test]
        fn layer_norm_matches_two_pass_reference(
            y in prop::collection::vec(-10.0f64..10.0, 2..32),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c: Vec<f64> = y.iter().map(|_| rng.random_range(0.5..1.5)).collect();
            let b: Vec<f64> = y.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = y.len() as f64;
            let mean = y.iter().sum::<f64>() / n;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = (var + 1e-5).sqrt();
            let out = layer_norm(&y, &c, &b, 1e-5).unwrap();
            for k in 0..y.len() {
                prop_assert!((out[k] - ((y[k] - mean) / s * c[k] + b[k])).abs() < 1e-6);
            }
        }
    }
}
