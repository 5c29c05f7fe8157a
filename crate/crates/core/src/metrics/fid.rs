//! Gaussian moment fitting and the Fréchet distance between Gaussians.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::annotation::FeatureMatrix;
use crate::error::{Error, Result};

/// Eigenvalues below `-NEG_EIG_TOL · max(1, |λ|max)` are treated as a genuine
/// loss of positive semi-definiteness rather than rounding noise.
pub const NEG_EIG_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Applies `x ↦ Q x`: mean `Qμ`, covariance `QΣQᵀ`.
    pub fn transformed(&self, q: &DMatrix<f64>) -> Self {
        Self {
            mean: q * &self.mean,
            covariance: q * &self.covariance * q.transpose(),
            count: self.count,
        }
    }
}

/// Sample mean and unbiased (N−1) covariance.
pub fn fit_gaussian(features: &FeatureMatrix) -> Result<FeatureStats> {
    let (n, d) = (features.rows(), features.dim());
    if n < 2 {
        return Err(Error::NotEnoughPoints { needed: 2, got: n });
    }
    let mut mean = DVector::zeros(d);
    for row in features.iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean /= n as f64;
    let centred = DMatrix::from_fn(n, d, |i, j| features.row(i)[j] - mean[j]);
    let mut covariance = centred.transpose() * &centred / (n as f64 - 1.0);
    // Exact symmetry regardless of GEMM summation order.
    covariance = (&covariance + covariance.transpose()) * 0.5;
    Ok(FeatureStats { mean, covariance, count: n })
}

fn psd_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(&worst) = eig.eigenvalues.iter().find(|&&v| v < -NEG_EIG_TOL * scale) {
        return Err(Error::NotPositiveSemiDefinite(worst));
    }
    Ok(eig)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m)?;
    let roots = eig.eigenvalues.map(|v| libm::sqrt(v.max(0.0)));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`.
///
/// The trace of the product root is taken as `Σ √λ` over the eigenvalues of
/// the symmetric matrix `Σa^{1/2} Σb Σa^{1/2}`, which shares its spectrum.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), actual: b.dim() });
    }
    psd_eigen(&b.covariance)?;
    let ra = psd_sqrt(&a.covariance)?;
    let inner = &ra * &b.covariance * &ra;
    let eig = psd_eigen(&inner)?;
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| libm::sqrt(v.max(0.0))).sum();
    let diff = (&a.mean - &b.mean).norm_squared();
    let d = diff + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Fréchet distance between Gaussians fit to two feature sets.
pub fn fid_from_features(samples: &FeatureMatrix, reference: &FeatureMatrix) -> Result<f64> {
    frechet_distance(&fit_gaussian(samples)?, &fit_gaussian(reference)?)
}

/// Convenience for building stats directly from a mean and a row-major covariance.
pub fn stats_from_parts(mean: Vec<f64>, covariance: Vec<f64>, count: usize) -> Result<FeatureStats> {
    let d = mean.len();
    if covariance.len() != d * d {
        return Err(Error::DimensionMismatch { expected: d * d, actual: covariance.len() });
    }
    Ok(FeatureStats {
        mean: DVector::from_vec(mean),
        covariance: DMatrix::from_row_slice(d, d, &covariance),
        count,
    })
}
