//! Dense linear algebra and seeded randomness shared by the rest of the crate.
//!
//! Everything is `f64` internally; file formats narrow to `f32` at the edge.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GdrError, Result};

/// Row-major dense matrix of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(GdrError::ShapeError(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(GdrError::InvalidMatrix(format!("non-finite element at index {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Stacks equal-length rows. Fails on ragged or empty input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| GdrError::EmptyInput("no rows".into()))?;
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(GdrError::ShapeError(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the backing store. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(GdrError::ShapeError(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(GdrError::ShapeError(format!(
                "cannot multiply {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok(self.row_iter().map(|r| dot(r, v)).collect())
    }

    fn zip_with(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(GdrError::ShapeError(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Largest |S_ij − S_ji| relative to the Frobenius norm (0 for the zero matrix).
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        let norm = self.frobenius();
        if norm == 0.0 {
            0.0
        } else {
            worst / norm
        }
    }

    pub fn symmetrized(&self) -> Mat {
        let mut m = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    /// Column means.
    pub fn col_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for r in self.row_iter() {
            axpy(1.0, r, &mut mean);
        }
        let n = self.rows.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// y += alpha * x
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Cosine similarity clamped to [−1, 1].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(GdrError::ShapeError(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = dot(u, u);
    let nv = dot(v, v);
    if nu == 0.0 || nv == 0.0 {
        return Err(GdrError::ZeroVector);
    }
    // sqrt(nu * nv) keeps cosine(x, x) exactly 1.
    Ok((dot(u, v) / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

/// Reproducible random stream identified by `(seed, stream)`.
///
/// Backed by ChaCha8 with the stream id selecting an independent keystream, so
/// workers can derive their own generators without sharing state.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh generator on another stream of the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Matrix of i.i.d. standard normal entries.
pub fn gaussian_mat(rng: &mut SeededRng, rows: usize, cols: usize) -> Mat {
    let data = rng.normal_vec(rows * cols);
    Mat { rows, cols, data }
}

/// Mean and covariance of a Gaussian fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub cov: Mat,
}

impl GaussianMoments {
    pub fn new(mean: Vec<f64>, cov: Mat) -> Result<Self> {
        if !cov.is_square() || cov.rows() != mean.len() {
            return Err(GdrError::ShapeError(format!(
                "mean of length {} with covariance {:?}",
                mean.len(),
                cov.shape()
            )));
        }
        if cov.asymmetry() > 1e-12 {
            return Err(GdrError::InvalidMatrix("covariance not symmetric".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Column means and unbiased sample covariance of the rows of `x`.
pub fn fit_moments(x: &Mat) -> Result<GaussianMoments> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(GdrError::InsufficientSamples { needed: 2, got: n });
    }
    let mean = x.col_means();
    let mut cov = Mat::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in x.row_iter() {
        for ((c, v), m) in centered.iter_mut().zip(r).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = cov.row_mut(i);
            for j in i..d {
                row[j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / denom;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    Ok(GaussianMoments { mean, cov })
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Eigenvalues are returned in descending order; the eigenvectors are the
/// columns of the returned matrix.
pub fn sym_eig(s: &Mat) -> Result<(Vec<f64>, Mat)> {
    if !s.is_square() {
        return Err(GdrError::InvalidMatrix(format!(
            "eigendecomposition of non-square {:?} matrix",
            s.shape()
        )));
    }
    if s.asymmetry() > 1e-9 {
        return Err(GdrError::InvalidMatrix(
            "eigendecomposition of asymmetric matrix".into(),
        ));
    }
    let n = s.rows();
    let mut a = s.symmetrized();
    let mut v = Mat::identity(n);
    let scale = a.frobenius();
    if n <= 1 || scale == 0.0 {
        let vals = (0..n).map(|i| a.get(i, i)).collect();
        return Ok((vals, v));
    }

    const MAX_SWEEPS: usize = 100;
    let tol = 1e-15 * scale;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - sn * akq);
                    a.set(k, q, sn * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - sn * aqk);
                    a.set(q, k, sn * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(GdrError::NumericalFailure(
            "Jacobi eigendecomposition did not converge".into(),
        ));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let vals = order.iter().map(|&i| a.get(i, i)).collect();
    let mut sorted = Mat::zeros(n, n);
    for (new_c, &old_c) in order.iter().enumerate() {
        for r in 0..n {
            sorted.set(r, new_c, v.get(r, old_c));
        }
    }
    Ok((vals, sorted))
}

/// V · diag(f(λ)) · Vᵀ, symmetrized.
fn spectral_map(vals: &[f64], vecs: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    let n = vals.len();
    let mapped: Vec<f64> = vals.iter().map(|&l| f(l)).collect();
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for (k, m) in mapped.iter().enumerate() {
                acc += vecs.get(i, k) * m * vecs.get(j, k);
            }
            out.set(i, j, acc);
            out.set(j, i, acc);
        }
    }
    out
}

/// Principal square root of `S + ridge·I`; negative eigenvalues are clipped to 0.
pub fn psd_sqrt(s: &Mat, ridge: f64) -> Result<Mat> {
    if !(ridge >= 0.0) {
        return Err(GdrError::InvalidMatrix(format!("ridge {ridge} < 0")));
    }
    let (vals, vecs) = sym_eig(s)?;
    Ok(spectral_map(&vals, &vecs, |l| (l + ridge).max(0.0).sqrt()))
}

/// (S + ridge·I)^{-1/2}. Fails when any shifted eigenvalue is not clearly positive.
pub fn psd_inv_sqrt(s: &Mat, ridge: f64) -> Result<Mat> {
    let (vals, vecs) = sym_eig(s)?;
    let top = vals.first().copied().unwrap_or(0.0).abs().max(1.0);
    if let Some(&min) = vals.last() {
        if min + ridge <= 1e-13 * top {
            return Err(GdrError::NumericalFailure(format!(
                "matrix is not positive definite (smallest eigenvalue {min:e}, ridge {ridge:e})"
            )));
        }
    }
    Ok(spectral_map(&vals, &vecs, |l| 1.0 / (l + ridge).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_sym(rng: &mut SeededRng, n: usize) -> Mat {
        let b = gaussian_mat(rng, n, n);
        b.add(&b.transpose()).unwrap().scale(0.5)
    }

    fn reconstruct(vals: &[f64], v: &Mat) -> Mat {
        v.matmul(&Mat::from_diag(vals)).unwrap().matmul(&v.transpose()).unwrap()
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let (vals, v) = sym_eig(&Mat::identity(3)).unwrap();
        assert_eq!(vals, vec![1.0, 1.0, 1.0]);
        let vtv = v.transpose().matmul(&v).unwrap();
        assert!(vtv.sub(&Mat::identity(3)).unwrap().frobenius() < 1e-12);

        let (vals, v) = sym_eig(&Mat::from_diag(&[1.0, 4.0])).unwrap();
        assert_eq!(vals, vec![4.0, 1.0]);
        assert!((v.get(1, 0).abs() - 1.0).abs() < 1e-12);
        assert!((v.get(0, 1).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eig_reconstructs_random_symmetric() {
        let mut rng = SeededRng::new(3, 0);
        for n in [2, 8, 31, 64] {
            let s = random_sym(&mut rng, n);
            let (vals, v) = sym_eig(&s).unwrap();
            assert!(vals.windows(2).all(|w| w[0] >= w[1]));
            let resid = reconstruct(&vals, &v).sub(&s).unwrap().frobenius() / s.frobenius();
            assert!(resid <= 1e-8, "n={n} residual {resid}");
            let ortho = v
                .transpose()
                .matmul(&v)
                .unwrap()
                .sub(&Mat::identity(n))
                .unwrap()
                .frobenius();
            assert!(ortho <= 1e-8, "n={n} orthogonality {ortho}");
        }
    }

    #[test]
    fn eig_rejects_bad_input() {
        let rect = Mat::zeros(2, 3);
        assert!(matches!(sym_eig(&rect), Err(GdrError::InvalidMatrix(_))));
        let asym = Mat::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&asym), Err(GdrError::InvalidMatrix(_))));
    }

    #[test]
    fn sqrt_closed_forms() {
        let s = psd_sqrt(&Mat::identity(4), 0.0).unwrap();
        assert!(s.sub(&Mat::identity(4)).unwrap().frobenius() < 1e-14);
        let s = psd_sqrt(&Mat::from_diag(&[9.0, 4.0]), 0.0).unwrap();
        assert!(s.sub(&Mat::from_diag(&[3.0, 2.0])).unwrap().frobenius() < 1e-14);
    }

    #[test]
    fn sqrt_squares_back_for_psd() {
        let mut rng = SeededRng::new(11, 0);
        let b = gaussian_mat(&mut rng, 4, 4);
        let a = b.matmul(&b.transpose()).unwrap();
        let r = psd_sqrt(&a, 0.0).unwrap();
        assert!(r.asymmetry() <= 1e-12);
        let rel = r.matmul(&r).unwrap().sub(&a).unwrap().frobenius() / a.frobenius();
        assert!(rel <= 1e-7, "{rel}");
    }

    #[test]
    fn sqrt_clips_negative_eigenvalues() {
        let s = Mat::from_diag(&[4.0, -1e-6]);
        let r = psd_sqrt(&s, 0.0).unwrap();
        assert_eq!(r.get(1, 1), 0.0);
        assert!((r.get(0, 0) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn inverse_sqrt_of_singular_fails_without_ridge() {
        let s = Mat::from_diag(&[1.0, 0.0]);
        assert!(matches!(psd_inv_sqrt(&s, 0.0), Err(GdrError::NumericalFailure(_))));
        let r = psd_inv_sqrt(&s, 1e-4).unwrap();
        assert!((r.get(1, 1) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn gaussian_is_reproducible_and_standard() {
        let a = gaussian_mat(&mut SeededRng::new(5, 1), 10, 7);
        let b = gaussian_mat(&mut SeededRng::new(5, 1), 10, 7);
        assert_eq!(a, b);

        let big = gaussian_mat(&mut SeededRng::new(5, 2), 1000, 100);
        let n = big.data().len() as f64;
        let mean = big.data().iter().sum::<f64>() / n;
        let var = big.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let a = gaussian_mat(&mut SeededRng::new(5, 0), 100, 100);
        let b = gaussian_mat(&mut SeededRng::new(5, 1), 100, 100);
        assert_ne!(a, b);
        let corr = cosine(a.data(), b.data()).unwrap();
        assert!(corr.abs() < 0.05, "{corr}");
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 1.0], &[1.0, -1.0]).unwrap(), 0.0);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(GdrError::ZeroVector)));
        let x = [0.3, -1.7, 2.2];
        assert_eq!(cosine(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn moments_hand_cases() {
        let x = Mat::from_rows(&[[0.0, 0.0], [2.0, 0.0]]).unwrap();
        let m = fit_moments(&x).unwrap();
        assert_eq!(m.mean, vec![1.0, 0.0]);
        assert_eq!(m.cov, Mat::from_diag(&[2.0, 0.0]));

        let same = Mat::from_rows(&[[1.0, 2.0, 3.0]; 5]).unwrap();
        assert_eq!(fit_moments(&same).unwrap().cov, Mat::zeros(3, 3));

        let one = Mat::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(fit_moments(&one), Err(GdrError::InsufficientSamples { .. })));
    }

    #[test]
    fn moments_recover_known_gaussian() {
        let mu = [1.0, -2.0, 0.5];
        let l = Mat::from_rows(&[[1.0, 0.0, 0.0], [0.5, 2.0, 0.0], [-0.3, 0.2, 0.7]]).unwrap();
        let sigma = l.matmul(&l.transpose()).unwrap();
        let mut rng = SeededRng::new(9, 0);
        let n = 100_000;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let e = rng.normal_vec(3);
            let mut x = l.matvec(&e).unwrap();
            axpy(1.0, &mu, &mut x);
            rows.push(x);
        }
        let m = fit_moments(&Mat::from_rows(&rows).unwrap()).unwrap();
        let mean_err = m.mean.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(mean_err / norm(&mu) < 0.02, "{mean_err}");
        let cov_err = m.cov.sub(&sigma).unwrap().frobenius() / sigma.frobenius();
        assert!(cov_err < 0.02, "{cov_err}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn eig_reconstruction_any_size(n in 1usize..24, seed in any::<u64>()) {
                let s = random_sym(&mut SeededRng::new(seed, 0), n);
                let (vals, v) = sym_eig(&s).unwrap();
                let resid = reconstruct(&vals, &v).sub(&s).unwrap().frobenius();
                prop_assert!(resid <= 1e-8 * s.frobenius().max(1e-300));
            }

            #[test]
            fn moments_permutation_invariant(seed in any::<u64>(), n in 2usize..30) {
                let mut rng = SeededRng::new(seed, 0);
                let x = gaussian_mat(&mut rng, n, 4);
                let mut order: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut order);
                let rows: Vec<&[f64]> = order.iter().map(|&i| x.row(i)).collect();
                let y = Mat::from_rows(&rows).unwrap();
                let a = fit_moments(&x).unwrap();
                let b = fit_moments(&y).unwrap();
                for (p, q) in a.mean.iter().zip(&b.mean) {
                    prop_assert!((p - q).abs() < 1e-12);
                }
                prop_assert!(a.cov.sub(&b.cov).unwrap().frobenius() < 1e-12);
            }
        }
    }
}
