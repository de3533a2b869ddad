//! Machinery shared by both filter variants: ensemble propagation, the
//! discrete mixture-weight update and posterior resampling.

use rand::Rng;

use crate::dynamics::{propagate, Epoch, FrameChain};
use crate::gmm::{Frame, Gmm, ParticleEnsemble};
use crate::linalg::{log_sum_exp, standard_normal};
use crate::observation::Measurement;
use crate::{par, Error, Result, Vec6};

/// Independent Gaussian jitter added to every particle after propagation,
/// in nondimensional units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcessNoise {
    pub pos_sigma: f64,
    pub vel_sigma: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self {
            pos_sigma: 1e-8,
            vel_sigma: 1e-8,
        }
    }
}

impl ProcessNoise {
    pub const ZERO: Self = Self {
        pos_sigma: 0.0,
        vel_sigma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.pos_sigma >= 0.0 && self.vel_sigma >= 0.0) || !self.pos_sigma.is_finite() || !self.vel_sigma.is_finite() {
            return Err(Error::InvalidArgument("process noise must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn is_zero(&self) -> bool {
        self.pos_sigma == 0.0 && self.vel_sigma == 0.0
    }
}

/// Particles already propagated to the measurement epoch, with the measurement.
#[derive(Clone, Debug)]
pub struct FilterStepInput {
    pub prior_particles: ParticleEnsemble<6>,
    pub measurement: Measurement,
    pub step_index: usize,
}

impl FilterStepInput {
    pub fn new(prior_particles: ParticleEnsemble<6>, measurement: Measurement, step_index: usize) -> Result<Self> {
        let gap = (prior_particles.epoch.0 - measurement.epoch.0).abs();
        if gap > 1e-12 * measurement.epoch.0.abs().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "particles at epoch {} but measurement at {}",
                prior_particles.epoch.0, measurement.epoch.0
            )));
        }
        Ok(Self {
            prior_particles,
            measurement,
            step_index,
        })
    }
}

/// Propagates every particle by `dt` and adds process-noise jitter.
///
/// Particles in the filter frame are mapped to the synodic frame at the
/// ensemble epoch, propagated, and mapped back at the new epoch. Each particle
/// draws its jitter from its own stream, so the result does not depend on the
/// number of worker threads.
pub fn propagate_ensemble<R: Rng + ?Sized>(
    e: &ParticleEnsemble<6>,
    dt: f64,
    chain: &FrameChain,
    q: &ProcessNoise,
    tol: f64,
    rng: &mut R,
) -> Result<ParticleEnsemble<6>> {
    if !(dt >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "propagation interval must be non-negative, got {dt}"
        )));
    }
    q.validate()?;
    let t0 = e.epoch;
    let t1 = Epoch(t0.0 + dt);
    let base = par::fork_seed(rng);
    let params = chain.params();
    let states = par::try_map(e.len(), |i| {
        let x = &e.states[i];
        let moved = match e.frame {
            Frame::Synodic => propagate(&crate::dynamics::SynodicState(*x), dt, params, tol).map(|s| s.0),
            Frame::Filter => {
                let s = chain.filter_to_synodic(x, t0);
                propagate(&s, dt, params, tol).map(|s| chain.synodic_to_filter(&s, t1))
            }
            other => {
                return Err(Error::FrameMismatch {
                    expected: Frame::Filter,
                    found: other,
                })
            }
        }
        .map_err(|err| Error::particle(i, err))?;
        if q.is_zero() {
            return Ok(moved);
        }
        let mut stream = par::stream_rng(base, i as u64);
        let xi = standard_normal::<6, _>(&mut stream);
        let sig = Vec6::new(q.pos_sigma, q.pos_sigma, q.pos_sigma, q.vel_sigma, q.vel_sigma, q.vel_sigma);
        Ok(moved + xi.component_mul(&sig))
    })?;
    Ok(ParticleEnsemble {
        states,
        weights: e.weights.clone(),
        frame: e.frame,
        epoch: t1,
    })
}

/// Discrete Bayes update of mixture weights, `w_i l_i / sum_j w_j l_j`,
/// evaluated in log space.
///
/// A `-inf` log-likelihood gives that component weight exactly zero. If no
/// component with positive prior weight has a finite likelihood the filter
/// has diverged and [`Error::AllLikelihoodsZero`] is returned.
pub fn update_weights(prior_weights: &[f64], log_likelihoods: &[f64]) -> Result<Vec<f64>> {
    if prior_weights.len() != log_likelihoods.len() {
        return Err(Error::LengthMismatch {
            left: prior_weights.len(),
            right: log_likelihoods.len(),
        });
    }
    if log_likelihoods.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::InvalidArgument("log-likelihoods must be finite or -inf".into()));
    }
    let peak = prior_weights
        .iter()
        .zip(log_likelihoods)
        .filter(|(w, _)| **w > 0.0)
        .map(|(_, l)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return Err(Error::AllLikelihoodsZero);
    }
    let terms: Vec<f64> = prior_weights
        .iter()
        .zip(log_likelihoods)
        .map(|(w, l)| w.ln() + (l - peak))
        .collect();
    let norm = log_sum_exp(&terms);
    Ok(terms.iter().map(|t| (t - norm).exp()).collect())
}

/// Draws `n` uniformly weighted particles from the posterior mixture.
pub fn resample_posterior<R: Rng + ?Sized>(g: &Gmm<6>, n: usize, epoch: Epoch, rng: &mut R) -> Result<ParticleEnsemble<6>> {
    g.sample(n, epoch, rng)
}
