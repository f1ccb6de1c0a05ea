use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::network::array_batch_to_tensor;

/// Gaussian fit of an embedded image set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    /// Sample mean and unbiased covariance of the rows of `samples`.
    pub fn from_samples(samples: &DMatrix<f64>) -> Result<Self> {
        let n = samples.nrows();
        if n < 2 {
            return Err(Error::invalid(format!("statistics need at least 2 samples, got {n}")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        let mean = samples.row_mean().transpose();
        let mut centered = samples.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Embeds `images` (each (3, H, W) in `[-1, 1]`) and fits a Gaussian.
pub fn embed_set(images: &[Array3<f32>], extractor: &FeatureExtractor) -> Result<GaussianStats> {
    if images.len() < 2 {
        return Err(Error::invalid(format!("FID needs at least 2 images, got {}", images.len())));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(images.len());
    // small chunks bound peak memory on large sets
    for chunk in images.chunks(8) {
        let refs: Vec<&Array3<f32>> = chunk.iter().collect();
        let batch = array_batch_to_tensor(&refs, DType::F32)?;
        let emb: Tensor = extractor.embed(&batch)?.to_dtype(DType::F64)?;
        rows.extend(emb.to_vec2::<f64>()?);
    }
    let d = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    GaussianStats::from_samples(&DMatrix::from_row_slice(images.len(), d, &flat))
}

/// Eigen-decomposition of a symmetric PSD matrix with small negative
/// eigenvalues clamped to zero. Larger negatives are rejected.
fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-8 * scale {
                return Err(Error::invalid(format!("{what} is not positive semidefinite (eigenvalue {v:e})")));
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m, what)?;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Frechet distance `|m_a - m_b|^2 + tr(A + B - 2 (A B)^(1/2))`.
///
/// The trace of `(A B)^(1/2)` is evaluated as the trace of the symmetric
/// square root of `A^(1/2) B A^(1/2)`, which has the same eigenvalues.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != (a.dim(), a.dim()) || b.cov.shape() != (b.dim(), b.dim()) {
        return Err(Error::shape(format!("dimension {}", a.dim()), format!("dimension {}", b.dim())));
    }
    for (name, s) in [("first", a), ("second", b)] {
        if s.mean.iter().chain(s.cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} statistics")));
        }
    }
    let diff = &a.mean - &b.mean;
    let sqrt_a = sqrt_psd(&a.cov, "first covariance")?;
    let inner = &sqrt_a * &b.cov * &sqrt_a;
    let cross = psd_eigen(&inner, "covariance product")?;
    let tr_cross: f64 = cross.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let value = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_cross;
    Ok(value.max(0.0))
}
