//! Fréchet distance, mean/covariance alignment, and diversity metrics.

use serde::{Deserialize, Serialize};

use crate::error::{GdrError, Result};
use crate::numerics::{cosine, fit_moments, psd_inv_sqrt, psd_sqrt, sym_eig, GaussianMoments, Mat};

pub const DEFAULT_RIDGE: f64 = 1e-6;

/// ‖μa−μb‖² + tr(Σa + Σb − 2·(Σa^{1/2} Σb Σa^{1/2})^{1/2}), clamped at 0.
pub fn frechet(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(GdrError::ShapeError(format!("moment dims {} vs {}", a.dim(), b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = psd_sqrt(&a.cov, 0.0)?;
    let inner = sa.matmul(&b.cov)?.matmul(&sa)?.symmetrized();
    let (vals, _) = sym_eig(&inner)?;
    let cross: f64 = vals.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Fréchet distance between the Gaussian fits of two row sets.
pub fn frechet_rows(a: &Mat, b: &Mat) -> Result<f64> {
    frechet(&fit_moments(a)?, &fit_moments(b)?)
}

/// x ↦ μ_tgt + A·(x − μ_src) with A = Σ_tgt^{1/2}·(Σ_src + ridge·I)^{-1/2}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTransform {
    pub mu_src: Vec<f64>,
    pub mu_tgt: Vec<f64>,
    pub a: Mat,
    pub ridge: f64,
}

impl AlignmentTransform {
    pub fn identity(d: usize) -> Self {
        Self {
            mu_src: vec![0.0; d],
            mu_tgt: vec![0.0; d],
            a: Mat::identity(d),
            ridge: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu_src.len()
    }

    pub fn apply_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(GdrError::ShapeError(format!(
                "vector of length {} for a {}-d transform",
                x.len(),
                self.dim()
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mu_src).map(|(v, m)| v - m).collect();
        let mut out = self.a.matvec(&centered)?;
        out.iter_mut().zip(&self.mu_tgt).for_each(|(o, m)| *o += m);
        Ok(out)
    }
}

pub fn fit_alignment(src: &Mat, tgt: &Mat, ridge: f64) -> Result<AlignmentTransform> {
    if src.cols() != tgt.cols() {
        return Err(GdrError::ShapeError(format!(
            "source has {} columns, target {}",
            src.cols(),
            tgt.cols()
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(GdrError::InvalidSpec(format!("ridge {ridge} must be finite and >= 0")));
    }
    let d = src.cols();
    if ridge == 0.0 {
        for m in [src, tgt] {
            if m.rows() < d + 1 {
                return Err(GdrError::InsufficientSamples {
                    needed: d + 1,
                    got: m.rows(),
                });
            }
        }
    }
    let s = fit_moments(src)?;
    let t = fit_moments(tgt)?;
    let a = psd_sqrt(&t.cov, 0.0)?.matmul(&psd_inv_sqrt(&s.cov, ridge)?)?;
    Ok(AlignmentTransform {
        mu_src: s.mean,
        mu_tgt: t.mean,
        a,
        ridge,
    })
}

pub fn apply_alignment(t: &AlignmentTransform, x: &Mat) -> Result<Mat> {
    if x.cols() != t.dim() {
        return Err(GdrError::ShapeError(format!(
            "{} columns for a {}-d transform",
            x.cols(),
            t.dim()
        )));
    }
    let rows = x.row_iter().map(|r| t.apply_vec(r)).collect::<Result<Vec<_>>>()?;
    Mat::from_rows(&rows)
}

/// Cosine similarity standing in for a text-audio embedding score.
pub fn clap_score(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine(a, b)
}

/// Mean pairwise cosine over unordered row pairs.
pub fn mics(cluster: &Mat) -> Result<f64> {
    let n = cluster.rows();
    if n < 2 {
        return Err(GdrError::InsufficientSamples { needed: 2, got: n });
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += cosine(cluster.row(i), cluster.row(j))?;
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// Vendi score with a cosine kernel: exp of the entropy of eig(K/n).
/// Returns (vendi, vendi / n).
pub fn vendi(x: &Mat) -> Result<(f64, f64)> {
    let n = x.rows();
    if n == 0 {
        return Err(GdrError::EmptyInput("vendi of zero rows".into()));
    }
    let mut k = Mat::zeros(n, n);
    for i in 0..n {
        k.set(i, i, 1.0 / n as f64);
        for j in i + 1..n {
            let c = cosine(x.row(i), x.row(j))? / n as f64;
            k.set(i, j, c);
            k.set(j, i, c);
        }
    }
    // a zero row slips past the pair loop when n = 1
    if n == 1 && x.row(0).iter().all(|v| *v == 0.0) {
        return Err(GdrError::ZeroVector);
    }
    let (vals, _) = sym_eig(&k)?;
    let entropy: f64 = vals.iter().filter(|&&l| l > 0.0).map(|&l| -l * l.ln()).sum();
    let v = entropy.exp().clamp(1.0, n as f64);
    Ok((v, v / n as f64))
}

/// Mean over clusters of the raw Vendi score.
pub fn minvs(clusters: &[Mat]) -> Result<f64> {
    if clusters.is_empty() {
        return Err(GdrError::EmptyInput("no clusters".into()));
    }
    let mut sum = 0.0;
    for c in clusters {
        if c.rows() < 2 {
            return Err(GdrError::InsufficientSamples {
                needed: 2,
                got: c.rows(),
            });
        }
        sum += vendi(c)?.0;
    }
    Ok(sum / clusters.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Mean over clusters of the intracluster MICS.
    pub mics: f64,
    /// Vendi of all rows of all clusters together.
    pub vendi: f64,
    pub nvendi: f64,
    pub minvs: f64,
    /// MINVS divided by the cluster size.
    pub minvs_normalized: f64,
    pub cluster_count: usize,
    pub cluster_size: usize,
}

/// Diversity of a set of equally sized query clusters (one per prompt).
pub fn diversity_report(clusters: &[Mat]) -> Result<DiversityReport> {
    let first = clusters
        .first()
        .ok_or_else(|| GdrError::EmptyInput("no clusters".into()))?;
    let size = first.rows();
    if clusters.iter().any(|c| c.rows() != size || c.cols() != first.cols()) {
        return Err(GdrError::ShapeError("clusters differ in shape".into()));
    }
    let mut mics_sum = 0.0;
    for c in clusters {
        mics_sum += mics(c)?;
    }
    let all: Vec<&[f64]> = clusters.iter().flat_map(|c| c.row_iter()).collect();
    let (v, nv) = vendi(&Mat::from_rows(&all)?)?;
    let mv = minvs(clusters)?;
    Ok(DiversityReport {
        mics: mics_sum / clusters.len() as f64,
        vendi: v,
        nvendi: nv,
        minvs: mv,
        minvs_normalized: mv / size as f64,
        cluster_count: clusters.len(),
        cluster_size: size,
    })
}
