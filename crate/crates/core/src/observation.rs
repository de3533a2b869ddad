//! Azimuth/elevation measurement model.
//!
//! Azimuth is measured in the local horizontal plane from East (topocentric x)
//! toward North (topocentric y); elevation is the angle above the horizon.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix2, SMatrix, SVector, Vector2, Vector3};
use rand::Rng;

use crate::dynamics::{Epoch, TopocentricState};
use crate::harness::csv::num;
use crate::linalg::{standard_normal, GaussianDensity};
use crate::{Error, Result, Vec6};

/// Ranges below this (km) have no defined line of sight.
pub const MIN_RANGE_KM: f64 = 1e-6;

/// Default angular noise: 1 arcsecond, 1-sigma.
pub const DEFAULT_SIGMA_RAD: f64 = 1.0 / 3600.0 * PI / 180.0;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub az: f64,
    pub el: f64,
    pub epoch: Epoch,
    /// Angular noise covariance (rad^2), ordered (az, el).
    pub noise_cov: Matrix2<f64>,
}

impl Measurement {
    pub fn new(az: f64, el: f64, epoch: Epoch, noise_cov: Matrix2<f64>) -> Result<Self> {
        if !(el.abs() <= FRAC_PI_2) || !az.is_finite() {
            return Err(Error::InvalidArgument(format!("angles out of range: az {az}, el {el}")));
        }
        if noise_cov[(0, 1)] != noise_cov[(1, 0)] || noise_cov.cholesky().is_none() {
            return Err(Error::NotPositiveDefinite {
                context: "measurement noise",
            });
        }
        Ok(Self {
            az: wrap_angle(az),
            el,
            epoch,
            noise_cov,
        })
    }

    pub fn angles(&self) -> Vector2<f64> {
        Vector2::new(self.az, self.el)
    }

    pub fn sigma_az(&self) -> f64 {
        self.noise_cov[(0, 0)].sqrt()
    }

    pub fn sigma_el(&self) -> f64 {
        self.noise_cov[(1, 1)].sqrt()
    }

    pub const CSV_HEADER: &'static str = "epoch_nondim,az_rad,el_rad,sigma_az_rad,sigma_el_rad";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            num(self.epoch.0),
            num(self.az),
            num(self.el),
            num(self.sigma_az()),
            num(self.sigma_el())
        )
    }

    /// Parses one CSV row written by [`Measurement::to_csv_row`] (diagonal noise).
    pub fn from_csv_row(row: &str) -> Result<Self> {
        let vals: Vec<f64> = row
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("measurement row {row:?}: {e}")))?;
        if vals.len() != 5 {
            return Err(Error::Format(format!("measurement row needs 5 fields: {row:?}")));
        }
        let cov = Matrix2::new(vals[3] * vals[3], 0.0, 0.0, vals[4] * vals[4]);
        Self::new(vals[1], vals[2], Epoch(vals[0]), cov)
    }
}

/// Diagonal noise covariance from 1-sigma angles.
pub fn diagonal_noise(sigma_az: f64, sigma_el: f64) -> Matrix2<f64> {
    Matrix2::new(sigma_az * sigma_az, 0.0, 0.0, sigma_el * sigma_el)
}

/// Default elevation mask, degrees.
pub const DEFAULT_MIN_ELEVATION_DEG: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisibilityPolicy {
    pub min_elevation: f64,
}

impl Default for VisibilityPolicy {
    fn default() -> Self {
        Self {
            min_elevation: DEFAULT_MIN_ELEVATION_DEG.to_radians(),
        }
    }
}

/// Azimuth and elevation of a line-of-sight vector of any scale.
fn angles_of(pos: &Vector3<f64>) -> (f64, f64) {
    let (x, y, z) = (pos[0], pos[1], pos[2]);
    let horiz = x.hypot(y);
    let az = if horiz == 0.0 {
        0.0
    } else {
        let a = y.atan2(x);
        if a == -PI {
            PI
        } else {
            a
        }
    };
    (az, z.atan2(horiz))
}

/// Azimuth and elevation of a topocentric state.
pub fn measure(s: &TopocentricState) -> Result<(f64, f64)> {
    let pos = s.position();
    let range = pos.norm();
    if !(range >= MIN_RANGE_KM) {
        return Err(Error::ZeroRange { range_km: range });
    }
    Ok(angles_of(&pos))
}

fn angle_residual(measured: &Vector2<f64>, predicted: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(wrap_angle(measured[0] - predicted[0]), measured[1] - predicted[1])
}

/// Gaussian log-likelihood of `z` given the topocentric state `s`.
pub fn log_likelihood(z: &Measurement, s: &TopocentricState) -> Result<f64> {
    let (az, el) = measure(s)?;
    let noise = GaussianDensity::new(Vector2::zeros(), &z.noise_cov)?;
    Ok(noise.log_pdf_of(&angle_residual(&z.angles(), &Vector2::new(az, el))))
}

/// Noisy measurement of `s_true` at `epoch`.
pub fn synthesize<R: Rng + ?Sized>(s_true: &TopocentricState, noise_cov: &Matrix2<f64>, epoch: Epoch, rng: &mut R) -> Result<Measurement> {
    let (az, el) = measure(s_true)?;
    let l = noise_cov
        .cholesky()
        .ok_or(Error::NotPositiveDefinite {
            context: "measurement noise",
        })?
        .l();
    let draw = l * standard_normal::<2, R>(rng);
    let el_noisy = (el + draw[1]).clamp(-FRAC_PI_2, FRAC_PI_2);
    Measurement::new(wrap_angle(az + draw[0]), el_noisy, epoch, *noise_cov)
}

/// True when the target is at or above the elevation mask.
pub fn visible(s: &TopocentricState, policy: &VisibilityPolicy) -> bool {
    measure(s).is_ok_and(|(_, el)| el >= policy.min_elevation)
}

/// A measurement function with additive Gaussian noise, as seen by the filters.
///
/// `D` is the state dimension and `M` the measurement dimension. The model
/// carries the measured value, so one instance describes one update.
pub trait ObservationModel<const D: usize, const M: usize>: Sync {
    fn predict(&self, x: &SVector<f64, D>) -> Result<SVector<f64, M>>;

    fn measured(&self) -> SVector<f64, M>;

    fn noise(&self) -> &GaussianDensity<M>;

    fn noise_cov(&self) -> SMatrix<f64, M, M> {
        self.noise().cov()
    }

    /// `a - b` in measurement space (wrapped for angular components).
    fn residual(&self, a: &SVector<f64, M>, b: &SVector<f64, M>) -> SVector<f64, M> {
        a - b
    }

    /// `log p(z | x)`; `-inf` where the prediction is undefined.
    fn log_likelihood(&self, x: &SVector<f64, D>) -> f64 {
        match self.predict(x) {
            Ok(y) => self.noise().log_pdf_of(&self.residual(&self.measured(), &y)),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Measurement Jacobian; central differences unless overridden.
    fn jacobian(&self, x: &SVector<f64, D>) -> Result<SMatrix<f64, M, D>> {
        let mut jac = SMatrix::<f64, M, D>::zeros();
        for j in 0..D {
            let h = 1e-7 * x[j].abs().max(1e-3);
            let mut xp = *x;
            let mut xm = *x;
            xp[j] += h;
            xm[j] -= h;
            let d = self.residual(&self.predict(&xp)?, &self.predict(&xm)?) / (2.0 * h);
            jac.set_column(j, &d);
        }
        Ok(jac)
    }

    /// Moves a prior draw toward the region the measurement allows. Used only
    /// to place MCMC chain starts; the default leaves the point unchanged.
    fn start_guess<R: Rng + ?Sized>(&self, x: &SVector<f64, D>, _rng: &mut R) -> SVector<f64, D> {
        *x
    }
}

/// Azimuth/elevation update for states in the filter frame (topocentric axes,
/// nondimensional units).
#[derive(Clone, Debug)]
pub struct AnglesObservation {
    pub measurement: Measurement,
    l_star_km: f64,
    noise: GaussianDensity<2>,
}

impl AnglesObservation {
    pub fn new(measurement: Measurement, l_star_km: f64) -> Result<Self> {
        let noise = GaussianDensity::new(Vector2::zeros(), &measurement.noise_cov)?;
        Ok(Self {
            measurement,
            l_star_km,
            noise,
        })
    }
}

impl ObservationModel<6, 2> for AnglesObservation {
    fn predict(&self, x: &Vec6) -> Result<Vector2<f64>> {
        let pos = Vector3::new(x[0], x[1], x[2]);
        let range_km = pos.norm() * self.l_star_km;
        if !(range_km >= MIN_RANGE_KM) {
            return Err(Error::ZeroRange { range_km });
        }
        let (az, el) = angles_of(&pos);
        Ok(Vector2::new(az, el))
    }

    fn measured(&self) -> Vector2<f64> {
        self.measurement.angles()
    }

    fn noise(&self) -> &GaussianDensity<2> {
        &self.noise
    }

    fn residual(&self, a: &Vector2<f64>, b: &Vector2<f64>) -> Vector2<f64> {
        angle_residual(a, b)
    }

    fn jacobian(&self, x: &Vec6) -> Result<SMatrix<f64, 2, 6>> {
        let (px, py, pz) = (x[0], x[1], x[2]);
        let h2 = px * px + py * py;
        let r2 = h2 + pz * pz;
        let h = h2.sqrt();
        if r2 * self.l_star_km * self.l_star_km < MIN_RANGE_KM * MIN_RANGE_KM || h == 0.0 {
            return Err(Error::ZeroRange {
                range_km: r2.sqrt() * self.l_star_km,
            });
        }
        let mut jac = SMatrix::<f64, 2, 6>::zeros();
        jac[(0, 0)] = -py / h2;
        jac[(0, 1)] = px / h2;
        jac[(1, 0)] = -px * pz / (r2 * h);
        jac[(1, 1)] = -py * pz / (r2 * h);
        jac[(1, 2)] = h / r2;
        Ok(jac)
    }

    /// Rotates the position onto a noise-perturbed line of sight, keeping its
    /// range and the velocity.
    fn start_guess<R: Rng + ?Sized>(&self, x: &Vec6, rng: &mut R) -> Vec6 {
        let pos = Vector3::new(x[0], x[1], x[2]);
        let range = pos.norm();
        let jitter = self.noise.factor() * standard_normal::<2, R>(rng);
        let az = self.measurement.az + jitter[0];
        let el = (self.measurement.el + jitter[1]).clamp(-FRAC_PI_2, FRAC_PI_2);
        let (se, ce) = el.sin_cos();
        let (sa, ca) = az.sin_cos();
        let dir = Vector3::new(ce * ca, ce * sa, se);
        let p = dir * range;
        Vec6::new(p[0], p[1], p[2], x[3], x[4], x[5])
    }
}

/// Linear-Gaussian measurement `z = H x + v`, used for surrogate problems.
#[derive(Clone, Debug)]
pub struct LinearObservation<const D: usize, const M: usize> {
    pub h: SMatrix<f64, M, D>,
    pub z: SVector<f64, M>,
    noise: GaussianDensity<M>,
}

impl<const D: usize, const M: usize> LinearObservation<D, M> {
    pub fn new(h: SMatrix<f64, M, D>, z: SVector<f64, M>, noise_cov: &SMatrix<f64, M, M>) -> Result<Self> {
        Ok(Self {
            h,
            z,
            noise: GaussianDensity::new(SVector::zeros(), noise_cov)?,
        })
    }
}

impl<const D: usize, const M: usize> ObservationModel<D, M> for LinearObservation<D, M> {
    fn predict(&self, x: &SVector<f64, D>) -> Result<SVector<f64, M>> {
        Ok(self.h * x)
    }

    fn measured(&self) -> SVector<f64, M> {
        self.z
    }

    fn noise(&self) -> &GaussianDensity<M> {
        &self.noise
    }

    fn jacobian(&self, _x: &SVector<f64, D>) -> Result<SMatrix<f64, M, D>> {
        Ok(self.h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn topo(x: f64, y: f64, z: f64) -> TopocentricState {
        TopocentricState(Vec6::new(x, y, z, 0.0, 0.0, 0.0))
    }

    fn meas(az: f64, el: f64, sigma: f64) -> Measurement {
        Measurement::new(az, el, Epoch(0.0), diagonal_noise(sigma, sigma)).unwrap()
    }

    #[test]
    fn axis_cases() {
        assert_eq!(measure(&topo(1.0, 0.0, 0.0)).unwrap(), (0.0, 0.0));
        let (az, el) = measure(&topo(0.0, 1.0, 0.0)).unwrap();
        assert!((az - FRAC_PI_2).abs() < 1e-15 && el == 0.0);
        assert_eq!(measure(&topo(0.0, 0.0, 1.0)).unwrap(), (0.0, FRAC_PI_2));
        assert!(matches!(measure(&topo(0.0, 0.0, 1e-9)), Err(Error::ZeroRange { .. })));
    }

    #[test]
    fn azimuth_range_is_half_open() {
        let (az, _) = measure(&topo(-1.0, -0.0, 0.0)).unwrap();
        assert_eq!(az, PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(PI), PI);
    }

    #[test]
    fn mode_value_of_likelihood() {
        let sigma = 1e-4;
        let s = topo(3.0, 4.0, 5.0);
        let (az, el) = measure(&s).unwrap();
        let ll = log_likelihood(&meas(az, el, sigma), &s).unwrap();
        let expected = -(2.0 * PI * sigma * sigma).ln();
        assert!((ll - expected).abs() < 1e-9 * expected.abs());
    }

    #[test]
    fn azimuth_residual_wraps() {
        let sigma = 1e-3;
        let s = topo((PI - 0.001).cos(), (PI - 0.001).sin(), 0.0);
        let ll = log_likelihood(&meas(-PI + 0.001, 0.0, sigma), &s).unwrap();
        let mode = -(2.0 * PI * sigma * sigma).ln();
        let expected = mode - 0.5 * (0.002f64 / sigma).powi(2);
        assert!((ll - expected).abs() < 1e-6, "{ll} vs {expected}");
    }

    #[test]
    fn likelihood_matches_direct_bivariate_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let s = topo(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0));
            let (az, el) = measure(&s).unwrap();
            let (sa, se, rho) = (
                rng.random_range(1e-5..1e-3),
                rng.random_range(1e-5..1e-3),
                rng.random_range(-0.9..0.9),
            );
            let c = sa * se * rho;
            let cov = Matrix2::new(sa * sa, c, c, se * se);
            let dz = (rng.random_range(-3.0..3.0) * sa, rng.random_range(-3.0..3.0) * se);
            let z = Measurement::new(az + dz.0, el + dz.1, Epoch(0.0), cov).unwrap();
            let ll = log_likelihood(&z, &s).unwrap();
            // Textbook bivariate normal density.
            let (u, v) = (wrap_angle(z.az - az) / sa, (z.el - el) / se);
            let q = (u * u - 2.0 * rho * u * v + v * v) / (1.0 - rho * rho);
            let direct = (-0.5 * q).exp() / (2.0 * PI * sa * se * (1.0 - rho * rho).sqrt());
            assert!((ll.exp() - direct).abs() / direct < 1e-12);
        }
    }

    #[test]
    fn zero_noise_limit_returns_clean_angles() {
        let s = topo(1.0, 2.0, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = synthesize(&s, &diagonal_noise(1e-150, 1e-150), Epoch(0.0), &mut rng).unwrap();
        let (az, el) = measure(&s).unwrap();
        assert_eq!((z.az, z.el), (az, el));
    }

    #[test]
    fn synthesized_residual_moments() {
        let s = topo(1.0, 2.0, 3.0);
        let (az, el) = measure(&s).unwrap();
        let (sa, se) = (2e-5, 5e-5);
        let cov = diagonal_noise(sa, se);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let res: Vec<Vector2<f64>> = (0..n)
            .map(|_| {
                let z = synthesize(&s, &cov, Epoch(0.0), &mut rng).unwrap();
                Vector2::new(wrap_angle(z.az - az), z.el - el)
            })
            .collect();
        let mean = res.iter().sum::<Vector2<f64>>() / n as f64;
        assert!(mean[0].abs() < 4.0 * sa / (n as f64).sqrt());
        assert!(mean[1].abs() < 4.0 * se / (n as f64).sqrt());
        let cov_hat = res.iter().map(|r| (r - mean) * (r - mean).transpose()).sum::<Matrix2<f64>>() / (n as f64 - 1.0);
        assert!((cov_hat[(0, 0)] / cov[(0, 0)] - 1.0).abs() < 0.05);
        assert!((cov_hat[(1, 1)] / cov[(1, 1)] - 1.0).abs() < 0.05);
        assert!(cov_hat[(0, 1)].abs() < 0.05 * sa * se);
    }

    #[test]
    fn visibility_mask_is_closed_below() {
        let mask = 0.3;
        let policy = VisibilityPolicy { min_elevation: mask };
        let at = |el: f64| topo(el.cos(), 0.0, el.sin());
        assert!(visible(&topo(0.0, 0.0, 1.0), &policy));
        assert!(!visible(&at(mask - 1e-9), &policy));
        // Build a state whose computed elevation is exactly the mask.
        let s = at(mask);
        let (_, el) = measure(&s).unwrap();
        let exact = VisibilityPolicy { min_elevation: el };
        assert!(visible(&s, &exact));
    }

    #[test]
    fn likelihood_peaks_at_zero_residual() {
        let s = topo(0.3, -0.7, 0.5);
        let (az, el) = measure(&s).unwrap();
        let cov = Matrix2::new(4e-8, 1e-8, 1e-8, 1e-8);
        let best = log_likelihood(&Measurement::new(az, el, Epoch(0.0), cov).unwrap(), &s).unwrap();
        for i in -5..=5 {
            for j in -5..=5 {
                if i == 0 && j == 0 {
                    continue;
                }
                let z = Measurement::new(az + i as f64 * 1e-5, el + j as f64 * 1e-5, Epoch(0.0), cov).unwrap();
                assert!(log_likelihood(&z, &s).unwrap() < best);
            }
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let z = meas(0.4, 0.6, 1e-5);
        let obs = AnglesObservation::new(z, 384_400.0).unwrap();
        let x = Vec6::new(0.3, -0.8, 0.5, 1.0, 2.0, 3.0);
        let analytic = obs.jacobian(&x).unwrap();
        let mut numeric = SMatrix::<f64, 2, 6>::zeros();
        for j in 0..6 {
            let h = 1e-7;
            let (mut xp, mut xm) = (x, x);
            xp[j] += h;
            xm[j] -= h;
            let d = obs.residual(&obs.predict(&xp).unwrap(), &obs.predict(&xm).unwrap()) / (2.0 * h);
            numeric.set_column(j, &d);
        }
        assert!((analytic - numeric).norm() < 1e-7);
    }

    #[test]
    fn csv_row_roundtrip() {
        let z = meas(-2.5, 0.7, 4.8e-5);
        let back = Measurement::from_csv_row(&z.to_csv_row()).unwrap();
        assert_eq!(back.az, z.az);
        assert_eq!(back.el, z.el);
        assert!((back.noise_cov - z.noise_cov).norm() < 1e-24);
    }

    proptest! {
        #[test]
        fn measure_respects_ranges(x in -1e6f64..1e6, y in -1e6f64..1e6, z in -1e6f64..1e6) {
            prop_assume!((x * x + y * y + z * z).sqrt() > 1.0);
            let (az, el) = measure(&topo(x, y, z)).unwrap();
            prop_assert!(az > -PI && az <= PI);
            prop_assert!(el.abs() <= FRAC_PI_2);
        }

        #[test]
        fn full_turn_in_azimuth_is_invisible(az in -3.0f64..3.0, el in -1.2f64..1.2) {
            let s = topo(1.0, 0.5, 0.2);
            let cov = diagonal_noise(1e-3, 1e-3);
            let a = log_likelihood(&Measurement::new(az, el, Epoch(0.0), cov).unwrap(), &s).unwrap();
            let b = log_likelihood(&Measurement::new(az + 2.0 * PI, el, Epoch(0.0), cov).unwrap(), &s).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
