//! Small dense linear-algebra and log-space helpers shared by the filters.

use nalgebra::{Cholesky, Const, SMatrix, SVector};

use crate::{Error, Result};

/// Diagonal floor added to covariances whose smallest eigenvalue drops below it,
/// in nondimensional units squared (a standard deviation of about 0.04 km in
/// position). It must stay below the cross-track variance left by a single
/// angle measurement, or every refit discards measurement information.
pub const COV_EPSILON: f64 = 1e-14;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `log(sum(exp(values)))`, exact for all-`-inf` input (returns `-inf`).
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn symmetrize<const D: usize>(m: &SMatrix<f64, D, D>) -> SMatrix<f64, D, D> {
    (m + m.transpose()) * 0.5
}

/// Symmetrizes `cov` and adds `eps * I` when its smallest eigenvalue is below `eps`.
///
/// The eigenvalue test is done with a Cholesky attempt on `cov - eps * I`, which
/// succeeds exactly when every eigenvalue exceeds `eps`.
pub fn regularize<const D: usize>(cov: &SMatrix<f64, D, D>, eps: f64) -> SMatrix<f64, D, D> {
    let sym = symmetrize(cov);
    let shifted = sym - SMatrix::<f64, D, D>::identity() * eps;
    if Cholesky::new(shifted).is_some() {
        sym
    } else {
        sym + SMatrix::<f64, D, D>::identity() * eps
    }
}

/// Cholesky factor of a covariance, retrying with growing diagonal loading.
pub fn robust_cholesky<const D: usize>(cov: &SMatrix<f64, D, D>, context: &'static str) -> Result<Cholesky<f64, Const<D>>> {
    if !cov.iter().all(|v| v.is_finite()) {
        return Err(Error::NotPositiveDefinite { context });
    }
    let sym = symmetrize(cov);
    if let Some(ch) = Cholesky::new(sym) {
        return Ok(ch);
    }
    let max_diag = (0..D).map(|i| sym[(i, i)].abs()).fold(0.0, f64::max);
    let scale = if max_diag > 0.0 { max_diag } else { 1.0 };
    let mut load = COV_EPSILON;
    for _ in 0..12 {
        let loaded = sym + SMatrix::<f64, D, D>::identity() * (load * scale);
        if let Some(ch) = Cholesky::new(loaded) {
            return Ok(ch);
        }
        load *= 10.0;
    }
    Err(Error::NotPositiveDefinite { context })
}

/// Precomputed multivariate normal with a Cholesky-factored covariance.
#[derive(Clone, Debug)]
pub struct GaussianDensity<const D: usize> {
    pub mean: SVector<f64, D>,
    chol: Cholesky<f64, Const<D>>,
    log_norm: f64,
}

impl<const D: usize> GaussianDensity<D> {
    pub fn new(mean: SVector<f64, D>, cov: &SMatrix<f64, D, D>) -> Result<Self> {
        let chol = robust_cholesky(cov, "gaussian density")?;
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let log_norm = -0.5 * (D as f64 * LN_2PI + log_det);
        Ok(Self { mean, chol, log_norm })
    }

    /// Squared Mahalanobis distance of an arbitrary deviation vector.
    pub fn mahalanobis_sq_of(&self, dev: &SVector<f64, D>) -> f64 {
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(dev)
            .unwrap_or_else(|| SVector::from_element(f64::INFINITY));
        y.norm_squared()
    }

    pub fn mahalanobis_sq(&self, x: &SVector<f64, D>) -> f64 {
        self.mahalanobis_sq_of(&(x - self.mean))
    }

    /// Log density of a deviation from the mean.
    pub fn log_pdf_of(&self, dev: &SVector<f64, D>) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis_sq_of(dev)
    }

    pub fn log_pdf(&self, x: &SVector<f64, D>) -> f64 {
        self.log_pdf_of(&(x - self.mean))
    }

    /// Lower-triangular factor `L` with `L L^T = cov`.
    pub fn factor(&self) -> SMatrix<f64, D, D> {
        self.chol.l()
    }

    pub fn cov(&self) -> SMatrix<f64, D, D> {
        let l = self.chol.l();
        l * l.transpose()
    }

    pub fn log_normalizer(&self) -> f64 {
        self.log_norm
    }
}

/// Weighted mean and population covariance. Weights need not be normalized.
pub fn weighted_moments<'a, const D: usize>(
    points: impl Iterator<Item = (&'a SVector<f64, D>, f64)> + Clone,
) -> Option<(f64, SVector<f64, D>, SMatrix<f64, D, D>)> {
    let mut total = 0.0;
    let mut mean = SVector::<f64, D>::zeros();
    for (x, w) in points.clone() {
        total += w;
        mean += x * w;
    }
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    mean /= total;
    let mut cov = SMatrix::<f64, D, D>::zeros();
    for (x, w) in points {
        let d = x - mean;
        cov += d * d.transpose() * w;
    }
    cov /= total;
    Some((total, mean, cov))
}

/// Draws a standard normal vector.
pub fn standard_normal<const D: usize, R: rand::Rng + ?Sized>(rng: &mut R) -> SVector<f64, D> {
    SVector::from_fn(|_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}
