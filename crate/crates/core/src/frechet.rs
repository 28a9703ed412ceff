//! Fréchet distance between Gaussian fits of two feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::nets::Real;

/// Mean and (unbiased) covariance of the rows of `x`.
pub fn fit_gaussian<F: Real>(x: ArrayView2<F>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 samples for a covariance, got {n}")));
    }
    let m = DMatrix::from_fn(n, d, |i, j| x[[i, j]].as_f64());
    let mean = DVector::from_fn(d, |j, _| m.column(j).sum() / n as f64);
    let mut centered = m;
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from round-off are clipped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁^½ Σ₂ Σ₁^½)^½)`.
pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> f64 {
    let s1 = psd_sqrt(cov1);
    let cross = psd_sqrt(&(&s1 * cov2 * &s1));
    let d = (mu1 - mu2).norm_squared() + cov1.trace() + cov2.trace() - 2.0 * cross.trace();
    d.max(0.0)
}

pub fn frechet_between<F: Real>(a: ArrayView2<F>, b: ArrayView2<F>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("feature widths {} vs {}", a.ncols(), b.ncols())));
    }
    let (m1, c1) = fit_gaussian(a)?;
    let (m2, c2) = fit_gaussian(b)?;
    Ok(frechet_distance(&m1, &c1, &m2, &c2))
}
