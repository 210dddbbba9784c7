//! Dense numeric kernels: row-major matrices, softmax, normalization layers
//! and a power-iteration spectral norm.
//!
//! Everything here is generic over [`Real`] so the same code runs in `f64`
//! under test and `f32` inside the model runtime.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type used by every kernel in the crate.
pub trait Real: Float + Sum + Debug + Default + Send + Sync + 'static {
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
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

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm2<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "matrix data",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, x: T) {
        self.data[i * self.cols + j] = x;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scaled(&self, alpha: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * alpha).collect(),
        }
    }

    /// Columns `start..start + len` as a new matrix.
    pub fn column_block(&self, start: usize, len: usize) -> Self {
        Self::from_fn(self.rows, len, |i, j| self.get(i, start + j))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                context: "matmul",
                expected: self.cols,
                actual: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d = *d + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · x` for a column vector `x`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `x · self` for a row vector `x`.
    pub fn vecmat(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        self.vecmat_into(x, &mut out);
        out
    }

    pub fn vecmat_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (k, &a) in x.iter().enumerate() {
            if a == T::zero() {
                continue;
            }
            for (o, &b) in out.iter_mut().zip(self.row(k)) {
                *o = *o + a * b;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }
}

/// Numerically stable softmax. Rejects empty and non-finite input.
pub fn softmax<T: Real>(scores: &[T]) -> Result<Vec<T>> {
    if scores.is_empty() {
        return Err(Error::Empty("softmax scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("softmax scores"));
    }
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    out.iter_mut().for_each(|p| *p = *p / total);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

/// Scale, shift and epsilon of a LayerNorm or RMSNorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    kind: NormKind,
    gamma: Vec<T>,
    bias: Vec<T>,
    epsilon: f64,
}

impl<T: Real> NormParams<T> {
    pub fn new(kind: NormKind, gamma: Vec<T>, bias: Vec<T>, epsilon: f64) -> Result<Self> {
        if gamma.len() != bias.len() {
            return Err(Error::DimensionMismatch {
                context: "norm bias",
                expected: gamma.len(),
                actual: bias.len(),
            });
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config(format!("norm epsilon must be > 0, got {epsilon}")));
        }
        if kind == NormKind::RmsNorm && bias.iter().any(|&b| b != T::zero()) {
            return Err(Error::config("RMSNorm does not take a bias"));
        }
        if gamma.iter().chain(&bias).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("norm parameters"));
        }
        Ok(Self {
            kind,
            gamma,
            bias,
            epsilon,
        })
    }

    pub fn rms(gamma: Vec<T>, epsilon: f64) -> Result<Self> {
        let bias = vec![T::zero(); gamma.len()];
        Self::new(NormKind::RmsNorm, gamma, bias, epsilon)
    }

    pub fn unit(kind: NormKind, dim: usize, epsilon: f64) -> Self {
        Self {
            kind,
            gamma: vec![T::one(); dim],
            bias: vec![T::zero(); dim],
            epsilon,
        }
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn gamma(&self) -> &[T] {
        &self.gamma
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn cast<U: Real>(&self) -> NormParams<U> {
        NormParams {
            kind: self.kind,
            gamma: self.gamma.iter().map(|x| U::of(x.as_f64())).collect(),
            bias: self.bias.iter().map(|x| U::of(x.as_f64())).collect(),
            epsilon: self.epsilon,
        }
    }
}

pub fn apply_norm<T: Real>(x: &[T], p: &NormParams<T>) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); x.len()];
    apply_norm_into(x, p, &mut out)?;
    Ok(out)
}

pub fn apply_norm_into<T: Real>(x: &[T], p: &NormParams<T>, out: &mut [T]) -> Result<()> {
    if x.len() != p.dim() || out.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            context: "apply_norm",
            expected: p.dim(),
            actual: x.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::Empty("apply_norm input"));
    }
    let n = T::of(x.len() as f64);
    let eps = T::of(p.epsilon);
    match p.kind {
        NormKind::LayerNorm => {
            let mean = x.iter().copied().sum::<T>() / n;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = (var + eps).sqrt().recip();
            for (i, o) in out.iter_mut().enumerate() {
                *o = p.gamma[i] * ((x[i] - mean) * inv) + p.bias[i];
            }
        }
        NormKind::RmsNorm => {
            let ms = x.iter().map(|&v| v * v).sum::<T>() / n;
            let inv = (ms + eps).sqrt().recip();
            for (i, o) in out.iter_mut().enumerate() {
                *o = p.gamma[i] * (x[i] * inv);
            }
        }
    }
    Ok(())
}

/// Result of power iteration on `mᵀm`.
#[derive(Debug, Clone)]
pub struct SpectralEstimate {
    pub sigma: f64,
    /// Unit right singular vector (length `cols`).
    pub right: Vec<f64>,
    /// Unit left singular vector (length `rows`).
    pub left: Vec<f64>,
    pub iterations: usize,
}

/// Largest singular value of `m` by power iteration on `mᵀm`.
///
/// The start vector is the normalized all-ones vector. Iteration stops once
/// the eigen-residual `‖mᵀm·v − ρv‖` drops below `tol·ρ`; the returned value
/// is `sqrt(ρ + residual)`, which never sits below the Rayleigh quotient.
pub fn spectral_norm<T: Real>(m: &Matrix<T>, tol: f64, max_iters: usize) -> Result<f64> {
    power_iteration(m, tol, max_iters).map(|e| e.sigma)
}

pub fn power_iteration<T: Real>(m: &Matrix<T>, tol: f64, max_iters: usize) -> Result<SpectralEstimate> {
    if !(tol > 0.0) {
        return Err(Error::config(format!("tolerance must be > 0, got {tol}")));
    }
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::Empty("spectral_norm matrix"));
    }
    let a = m.cast::<f64>();
    if a.data.iter().all(|&x| x == 0.0) {
        return Err(Error::config("spectral_norm of the zero matrix"));
    }
    let n = a.cols;
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut estimate = 0.0;
    for iter in 1..=max_iters {
        let mv = a.matvec(&v);
        let w = a.transpose_matvec(&mv);
        let rho = dot(&v, &w);
        let residual = w.iter().zip(&v).map(|(wi, vi)| (wi - rho * vi).powi(2)).sum::<f64>().sqrt();
        estimate = (rho + residual).max(0.0).sqrt();
        let wn = norm2(&w);
        if wn == 0.0 {
            // start vector lies in the null space of m
            return Err(Error::NotConverged { iters: iter, estimate });
        }
        if residual <= tol * rho {
            let left = if estimate > 0.0 {
                let s = norm2(&mv);
                mv.iter().map(|x| x / s).collect()
            } else {
                vec![0.0; a.rows]
            };
            return Ok(SpectralEstimate {
                sigma: estimate,
                right: v,
                left,
                iterations: iter,
            });
        }
        v = w.iter().map(|x| x / wn).collect();
    }
    Err(Error::NotConverged {
        iters: max_iters,
        estimate,
    })
}

impl Matrix<f64> {
    fn transpose_matvec(&self, y: &[f64]) -> Vec<f64> {
        self.vecmat(y)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Error-free transformation: a + b = s + e exactly.
    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    /// Softmax with double-double accumulation of the normalizer.
    fn softmax_extended(x: &[f64]) -> Vec<f64> {
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let (mut hi, mut lo) = (0.0, 0.0);
        for &e in &exps {
            let (s, err) = two_sum(hi, e);
            hi = s;
            lo += err;
        }
        let total = hi + lo;
        exps.iter().map(|e| e / total).collect()
    }

    /// One-sided Jacobi SVD; returns singular values in descending order.
    pub(crate) fn jacobi_singular_values(m: &Matrix<f64>) -> Vec<f64> {
        let (rows, cols) = (m.rows(), m.cols());
        let mut a: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| m.get(i, j)).collect()).collect();
        for _sweep in 0..100 {
            let mut off = 0.0f64;
            for p in 0..cols {
                for q in p + 1..cols {
                    let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                    let beta: f64 = a[q].iter().map(|x| x * x).sum();
                    let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                    if gamma == 0.0 {
                        continue;
                    }
                    off = off.max(gamma.abs() / (alpha * beta).sqrt());
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..rows {
                        let (x, y) = (a[p][i], a[q][i]);
                        a[p][i] = c * x - s * y;
                        a[q][i] = s * x + c * y;
                    }
                }
            }
            if off < 1e-15 {
                break;
            }
        }
        let mut sv: Vec<f64> = a.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
        sv
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn softmax_symmetric_pair() {
        assert_eq!(softmax(&[0.0f64, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let p = softmax(&[1000.0f64, 0.0]).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_empty_and_nan() {
        assert!(matches!(softmax::<f64>(&[]), Err(Error::Empty(_))));
        assert!(matches!(softmax(&[0.0, f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_matches_extended_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let x: Vec<f64> = (0..16).map(|_| rng.random_range(-20.0..20.0)).collect();
            let got = softmax(&x).unwrap();
            let want = softmax_extended(&x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let p = NormParams::unit(NormKind::LayerNorm, 6, 1e-5);
        let y = apply_norm(&[3.5f64; 6], &p).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = NormParams::unit(NormKind::LayerNorm, 32, 1e-300);
        let x: Vec<f64> = (0..32).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y = apply_norm(&x, &p).unwrap();
        let mean = y.iter().sum::<f64>() / 32.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let d = rng.random_range(2..40);
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let gamma: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let bias: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let eps = 1e-6;
            let p = NormParams::new(NormKind::LayerNorm, gamma.clone(), bias.clone(), eps).unwrap();
            let y = apply_norm(&x, &p).unwrap();
            // x = gamma ⊙ (x̂ − mu)/sigma + b, sigma the standard deviation
            let mu = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let sigma = (var + eps).sqrt();
            for i in 0..d {
                let want = gamma[i] * (x[i] - mu) / sigma + bias[i];
                assert!((y[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rms_norm_has_no_shift() {
        let p = NormParams::rms(vec![1.0f64; 4], 1e-300).unwrap();
        let y = apply_norm(&[1.0, -1.0, 1.0, -1.0], &p).unwrap();
        assert_eq!(y, vec![1.0, -1.0, 1.0, -1.0]);
        let y = apply_norm(&[2.0, 2.0, 2.0, 2.0], &p).unwrap();
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn rms_norm_with_bias_is_rejected() {
        let err = NormParams::new(NormKind::RmsNorm, vec![1.0f64; 3], vec![0.0, 0.1, 0.0], 1e-5);
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn apply_norm_length_mismatch() {
        let p = NormParams::unit(NormKind::RmsNorm, 4, 1e-5);
        assert!(matches!(
            apply_norm(&[1.0f64; 3], &p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn spectral_norm_identity_and_diagonal() {
        let i4 = Matrix::<f64>::identity(4);
        assert_eq!(spectral_norm(&i4, 1e-12, 100).unwrap(), 1.0);
        let d = Matrix::from_fn(3, 3, |i, j| if i == j { [3.0, 1.0, 0.5][i] } else { 0.0 });
        let s = spectral_norm(&d, 1e-12, 1000).unwrap();
        assert!((s - 3.0).abs() < 1e-10, "{s}");
    }

    #[test]
    fn spectral_norm_matches_jacobi_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let m = random_matrix(&mut rng, 8, 8);
            let want = jacobi_singular_values(&m)[0];
            let got = spectral_norm(&m, 1e-13, 100_000).unwrap();
            assert!(((got - want) / want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn spectral_norm_rectangular_matches_jacobi() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_matrix(&mut rng, 12, 5);
        let want = jacobi_singular_values(&m)[0];
        let est = power_iteration(&m, 1e-13, 100_000).unwrap();
        assert!(((est.sigma - want) / want).abs() < 1e-8);
        // left = m·right / sigma
        let mv = m.matvec(&est.right);
        for (l, x) in est.left.iter().zip(&mv) {
            assert!((l - x / want).abs() < 1e-6);
        }
    }

    #[test]
    fn spectral_norm_reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 8, 8);
        match spectral_norm(&m, 1e-15, 2) {
            Err(Error::NotConverged { iters, estimate }) => {
                assert_eq!(iters, 2);
                assert!(estimate > 0.0);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn matmul_and_transpose() {
        let a = Matrix::new(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = a.transpose();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[14.0, 32.0, 32.0, 77.0]);
        assert_eq!(a.vecmat(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        assert_eq!(a.matvec(&[1.0, 0.0, 1.0]), vec![4.0, 10.0]);
        assert!(Matrix::new(2, 2, vec![1.0f64]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(x in prop::collection::vec(-50.0f64..50.0, 1..64)) {
            let p = softmax(&x).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let arg = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &y)| if y > v[b] { i } else { b });
            prop_assert_eq!(arg(&p), arg(&x));
        }

        #[test]
        fn softmax_is_shift_invariant(
            x in prop::collection::vec(-50.0f64..50.0, 1..64),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&x).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn spectral_norm_is_absolutely_homogeneous(seed in any::<u64>(), alpha in -10.0f64..10.0) {
            prop_assume!(alpha.abs() > 1e-3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, 6, 6);
            let s = spectral_norm(&m, 1e-12, 200_000).unwrap();
            let sa = spectral_norm(&m.scaled(alpha), 1e-12, 200_000).unwrap();
            prop_assert!((sa - alpha.abs() * s).abs() <= 1e-8 * sa.max(1.0));
        }
    }
}
