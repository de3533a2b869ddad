//! MCMC measurement update of each mixture component, with harmonic-mean
//! component likelihoods.

pub mod mcmc;

use nalgebra::{SMatrix, SVector};
use rand::Rng;

use crate::dynamics::Epoch;
use crate::gmm::{cluster_auto, Frame, Gmm, ParticleEnsemble, UniformBox};
use crate::harness::csv::num;
use crate::linalg::{regularize, robust_cholesky, standard_normal, weighted_moments, GaussianDensity, COV_EPSILON};
use crate::observation::ObservationModel;
use crate::pgm_core::update_weights;
use crate::{par, Error, Result};

pub use mcmc::{metropolis_chain, Chain};

/// Burn-in steps between proposal-scale adjustments.
const ADAPT_BLOCK: usize = 100;
/// Acceptance band targeted while adapting.
const ADAPT_LOW: f64 = 0.2;
const ADAPT_HIGH: f64 = 0.4;
/// Gauss-Newton iterations when conditioning a chain start on the measurement.
const MAX_CONDITION_ITERATIONS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McmcConfig {
    pub n_chains: usize,
    pub chain_length: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Multiplier `c` applied to the pilot covariance to form the proposal.
    pub proposal_scale: f64,
    /// Conditioned prior draws used to estimate the proposal covariance.
    pub pilot_draws: usize,
    pub max_init_attempts: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_chains: 24,
            chain_length: 20_000,
            burn_in: 5_000,
            thin: 500,
            proposal_scale: 2.38 * 2.38 / 6.0,
            pilot_draws: 128,
            max_init_attempts: 100_000,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_chains == 0 {
            return bad("n_chains must be at least 1");
        }
        if self.chain_length <= self.burn_in {
            return bad("chain_length must exceed burn_in");
        }
        if self.thin == 0 {
            return bad("thin must be at least 1");
        }
        if self.retained_per_chain() == 0 {
            return bad("chain_length - burn_in must be at least thin");
        }
        if !(self.proposal_scale > 0.0 && self.proposal_scale.is_finite()) {
            return bad("proposal_scale must be positive");
        }
        if self.max_init_attempts == 0 {
            return bad("max_init_attempts must be at least 1");
        }
        Ok(())
    }

    pub fn retained_per_chain(&self) -> usize {
        (self.chain_length - self.burn_in) / self.thin
    }

    pub fn retained_total(&self) -> usize {
        self.n_chains * self.retained_per_chain()
    }
}

/// How each MCMC ensemble is split into Gaussians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterConfig {
    pub max_components: usize,
    pub elbow_threshold: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            max_components: 6,
            elbow_threshold: 0.05,
        }
    }
}

/// Prior for one component's update: a weighted Gaussian or a uniform box.
#[derive(Clone, Debug)]
pub enum PriorComponent<const D: usize> {
    Gaussian { weight: f64, density: GaussianDensity<D> },
    Uniform(UniformBox<D>),
}

impl<const D: usize> PriorComponent<D> {
    pub fn gaussian(weight: f64, mean: SVector<f64, D>, cov: &SMatrix<f64, D, D>) -> Result<Self> {
        Ok(Self::Gaussian {
            weight,
            density: GaussianDensity::new(mean, cov)?,
        })
    }

    /// One prior component per mixture component.
    pub fn from_gmm(g: &Gmm<D>) -> Vec<Self> {
        g.components()
            .iter()
            .map(|c| Self::Gaussian {
                weight: c.weight(),
                density: c.density().clone(),
            })
            .collect()
    }

    pub fn weight(&self) -> f64 {
        match self {
            Self::Gaussian { weight, .. } => *weight,
            Self::Uniform(_) => 1.0,
        }
    }

    pub fn log_pdf(&self, x: &SVector<f64, D>) -> f64 {
        match self {
            Self::Gaussian { density, .. } => density.log_pdf(x),
            Self::Uniform(b) => b.log_pdf(x),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> SVector<f64, D> {
        match self {
            Self::Gaussian { density, .. } => density.mean + density.factor() * standard_normal::<D, R>(rng),
            Self::Uniform(b) => SVector::from_fn(|i, _| rng.random_range(b.lower[i]..=b.upper[i])),
        }
    }

    /// Covariance of the component (`(upper - lower)^2 / 12` on the box diagonal).
    pub fn cov(&self) -> SMatrix<f64, D, D> {
        match self {
            Self::Gaussian { density, .. } => density.cov(),
            Self::Uniform(b) => SMatrix::from_diagonal(&(b.upper - b.lower).map(|w| w * w / 12.0)),
        }
    }
}

/// Retained MCMC samples for one prior component.
#[derive(Clone, Debug)]
pub struct McmcEnsemble<const D: usize> {
    pub samples: Vec<SVector<f64, D>>,
    /// Post-burn-in acceptance fraction over all chains.
    pub acceptance_rate: f64,
    pub component: usize,
}

/// `log prior(x) + log p(z | x)`; `-inf` off the prior's support.
pub fn target_log_density<const D: usize, const M: usize, O>(prior: &PriorComponent<D>, obs: &O, x: &SVector<f64, D>) -> f64
where
    O: ObservationModel<D, M>,
{
    let lp = prior.log_pdf(x);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    lp + obs.log_likelihood(x)
}

/// Randomized-maximum-likelihood draw: the minimizer of
/// `|x - x_p|^2_P + |z + v - h(x)|^2_R` for a prior draw `x_p` and
/// measurement noise draw `v`, by damped Gauss-Newton from `guess`.
/// For a linear measurement this is an exact posterior draw.
fn rml_draw<const D: usize, const M: usize, O, R>(
    density: &GaussianDensity<D>,
    obs: &O,
    x_p: &SVector<f64, D>,
    guess: SVector<f64, D>,
    rng: &mut R,
) -> SVector<f64, D>
where
    O: ObservationModel<D, M>,
    R: Rng + ?Sized,
{
    let p = density.cov();
    let noise = obs.noise();
    let z = obs.measured() + noise.factor() * standard_normal::<M, R>(rng);
    let cost = |x: &SVector<f64, D>| match obs.predict(x) {
        Ok(y) => density.mahalanobis_sq_of(&(x - x_p)) + noise.mahalanobis_sq_of(&obs.residual(&z, &y)),
        Err(_) => f64::INFINITY,
    };
    let mut x = guess;
    let mut j = cost(&x);
    if !j.is_finite() {
        x = *x_p;
        j = cost(&x);
    }
    for _ in 0..MAX_CONDITION_ITERATIONS {
        let (Ok(h), Ok(y)) = (obs.jacobian(&x), obs.predict(&x)) else {
            break;
        };
        let r = obs.residual(&z, &y);
        let s = h * p * h.transpose() + noise.cov();
        let Some(s_inv) = s.try_inverse() else {
            break;
        };
        let target = x_p + p * h.transpose() * s_inv * (r + h * (x - x_p));
        let step = target - x;
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..20 {
            let cand = x + step * alpha;
            let jc = cost(&cand);
            if jc < j {
                x = cand;
                j = jc;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved || (step * alpha).norm() <= 1e-13 * x.norm().max(1e-12) {
            break;
        }
    }
    x
}

/// Prior draw moved onto the measurement: the observation model's start
/// guess, refined by a randomized-maximum-likelihood solve for Gaussian priors.
fn conditioned_draw<const D: usize, const M: usize, O, R>(prior: &PriorComponent<D>, obs: &O, rng: &mut R) -> SVector<f64, D>
where
    O: ObservationModel<D, M>,
    R: Rng + ?Sized,
{
    let x_p = prior.draw(rng);
    let guess = obs.start_guess(&x_p, rng);
    match prior {
        PriorComponent::Uniform(_) => guess,
        PriorComponent::Gaussian { density, .. } => rml_draw(density, obs, &x_p, guess, rng),
    }
}

/// Runs one chain with proposal-scale adaptation during burn-in, returning the
/// thinned post-burn-in states and the number of post-burn-in acceptances.
fn adaptive_chain<const D: usize, T, R>(
    target: &T,
    init: &SVector<f64, D>,
    base_factor: &SMatrix<f64, D, D>,
    cfg: &McmcConfig,
    rng: &mut R,
) -> Result<(Vec<SVector<f64, D>>, usize)>
where
    T: Fn(&SVector<f64, D>) -> f64,
    R: Rng + ?Sized,
{
    let mut x = *init;
    let mut tx = target(&x);
    if !(tx > f64::NEG_INFINITY) {
        return Err(Error::InitOutsideSupport);
    }
    let mut scale = 1.0;
    let mut l = *base_factor;
    let mut block_accepts = 0;
    for step in 1..=cfg.burn_in {
        let (nx, ntx, acc) = mcmc::metropolis_step(target, &x, tx, &l, rng);
        x = nx;
        tx = ntx;
        block_accepts += acc as usize;
        if step % ADAPT_BLOCK == 0 {
            let rate = block_accepts as f64 / ADAPT_BLOCK as f64;
            if rate < ADAPT_LOW {
                scale *= 0.7;
            } else if rate > ADAPT_HIGH {
                scale *= 1.4;
            }
            l = base_factor * scale;
            block_accepts = 0;
        }
    }
    let mut kept = Vec::with_capacity(cfg.retained_per_chain());
    let mut accepted = 0;
    for step in 1..=(cfg.chain_length - cfg.burn_in) {
        let (nx, ntx, acc) = mcmc::metropolis_step(target, &x, tx, &l, rng);
        x = nx;
        tx = ntx;
        accepted += acc as usize;
        if step % cfg.thin == 0 {
            kept.push(x);
        }
    }
    Ok((kept, accepted))
}

/// Samples the posterior `prior(x) p(z | x)` of one component with
/// `n_chains` independent Metropolis chains.
///
/// Chain starts are prior draws conditioned on the measurement (see
/// [`ObservationModel::start_guess`]); draws with zero target density are
/// rejected. The proposal covariance is `proposal_scale` times the covariance
/// of the conditioned pilot draws, rescaled during burn-in toward 20-40%
/// acceptance and frozen afterwards.
pub fn sample_component_posterior<const D: usize, const M: usize, O, R>(
    prior: &PriorComponent<D>,
    obs: &O,
    cfg: &McmcConfig,
    component: usize,
    rng: &mut R,
) -> Result<McmcEnsemble<D>>
where
    O: ObservationModel<D, M>,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let target = |x: &SVector<f64, D>| target_log_density(prior, obs, x);
    let wanted = cfg.pilot_draws.max(cfg.n_chains).max(D + 1);
    let mut pilots = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while pilots.len() < wanted && attempts < cfg.max_init_attempts {
        attempts += 1;
        let x = conditioned_draw(prior, obs, rng);
        if target(&x) > f64::NEG_INFINITY {
            pilots.push(x);
        }
    }
    if pilots.len() < cfg.n_chains {
        return Err(Error::InitializationFailed { attempts });
    }
    let (_, _, pilot_cov) = weighted_moments(pilots.iter().map(|x| (x, 1.0))).expect("non-empty pilot set");
    let proposal = regularize(&pilot_cov, COV_EPSILON) * cfg.proposal_scale;
    let factor = robust_cholesky(&proposal, "proposal covariance")?.l();

    let base = par::fork_seed(rng);
    let chains = par::try_map(cfg.n_chains, |c| {
        let mut stream = par::stream_rng(base, c as u64);
        adaptive_chain(&target, &pilots[c], &factor, cfg, &mut stream)
    })?;
    let accepted: usize = chains.iter().map(|(_, a)| a).sum();
    let samples = chains.into_iter().flat_map(|(s, _)| s).collect();
    Ok(McmcEnsemble {
        samples,
        acceptance_rate: accepted as f64 / (cfg.n_chains * (cfg.chain_length - cfg.burn_in)) as f64,
        component,
    })
}

/// Harmonic-mean estimate of the component likelihood from posterior samples,
/// `log S - logsumexp(-log p(z | x_s))`.
///
/// Evaluated as `-(m + log(mean(exp(-log p - m))))` with `m` the largest
/// term, which returns a constant likelihood exactly.
pub fn ensemble_likelihood<const D: usize, const M: usize, O>(samples: &[SVector<f64, D>], obs: &O) -> f64
where
    O: ObservationModel<D, M>,
{
    if samples.is_empty() {
        return f64::NEG_INFINITY;
    }
    let neg: Vec<f64> = samples.iter().map(|x| -obs.log_likelihood(x)).collect();
    let m = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    let mean = neg.iter().map(|v| (v - m).exp()).sum::<f64>() / samples.len() as f64;
    -(m + mean.ln())
}

/// Per-component row of the diagnostics file.
#[derive(Clone, Debug, PartialEq)]
pub struct Pgm2Diagnostics {
    pub step: usize,
    pub component: usize,
    pub acceptance_rate: f64,
    pub retained_samples: usize,
    pub log_likelihood: f64,
    /// Gaussians fitted to this component's ensemble.
    pub n_sub: usize,
}

impl Pgm2Diagnostics {
    pub const CSV_HEADER: &'static str = "step,component,acceptance_rate,retained_samples,log_likelihood,n_i";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.component,
            num(self.acceptance_rate),
            self.retained_samples,
            num(self.log_likelihood),
            self.n_sub
        )
    }
}

#[derive(Clone, Debug)]
pub struct Pgm2Output<const D: usize> {
    pub posterior: Gmm<D>,
    pub particles: ParticleEnsemble<D>,
    pub diagnostics: Vec<Pgm2Diagnostics>,
}

/// One filter step: sample every prior component's posterior, split each
/// ensemble into Gaussians, weight components by their harmonic-mean
/// likelihoods and resample `n_out` particles from the combined mixture.
///
/// Components whose chains cannot be started drop out with zero weight; if
/// none can be started the step reports loss of custody.
#[allow(clippy::too_many_arguments)]
pub fn pgm2_step<const D: usize, const M: usize, O, R>(
    priors: &[PriorComponent<D>],
    obs: &O,
    mcmc: &McmcConfig,
    clusters: &ClusterConfig,
    n_out: usize,
    frame: Frame,
    epoch: Epoch,
    step: usize,
    rng: &mut R,
) -> Result<Pgm2Output<D>>
where
    O: ObservationModel<D, M>,
    R: Rng + ?Sized,
{
    mcmc.validate()?;
    if priors.is_empty() {
        return Err(Error::InvalidArgument("no prior components".into()));
    }
    let base = par::fork_seed(rng);
    let results = par::map(priors.len(), |i| {
        let mut stream = par::stream_rng(base, i as u64);
        let ens = match sample_component_posterior(&priors[i], obs, mcmc, i, &mut stream) {
            Ok(ens) => ens,
            Err(Error::InitializationFailed { .. }) => return Ok(None),
            Err(e) => return Err(Error::component(i, e)),
        };
        let ll = ensemble_likelihood(&ens.samples, obs);
        let cloud = ParticleEnsemble::new(ens.samples.clone(), frame, epoch)?;
        let split = cluster_auto(&cloud, clusters.max_components, clusters.elbow_threshold, &mut stream)?;
        Ok(Some((ens, ll, split.gmm)))
    });
    let results: Vec<_> = results.into_iter().collect::<Result<_>>()?;
    if results.iter().all(Option::is_none) {
        return Err(Error::LossOfCustody {
            step,
            reason: "no mixture component admits a chain start consistent with the measurement".into(),
        });
    }
    let prior_weights: Vec<f64> = priors.iter().map(PriorComponent::weight).collect();
    let lls: Vec<f64> = results
        .iter()
        .map(|r| r.as_ref().map_or(f64::NEG_INFINITY, |(_, ll, _)| *ll))
        .collect();
    let weights = update_weights(&prior_weights, &lls)?;

    let mut parts = Vec::new();
    let mut diagnostics = Vec::with_capacity(priors.len());
    for (i, r) in results.iter().enumerate() {
        match r {
            Some((ens, ll, sub)) => {
                for c in sub.components() {
                    parts.push((weights[i] * c.weight(), *c.mean(), *c.cov()));
                }
                diagnostics.push(Pgm2Diagnostics {
                    step,
                    component: i,
                    acceptance_rate: ens.acceptance_rate,
                    retained_samples: ens.samples.len(),
                    log_likelihood: *ll,
                    n_sub: sub.len(),
                });
            }
            None => diagnostics.push(Pgm2Diagnostics {
                step,
                component: i,
                acceptance_rate: 0.0,
                retained_samples: 0,
                log_likelihood: f64::NEG_INFINITY,
                n_sub: 0,
            }),
        }
    }
    let posterior = Gmm::new(parts, frame)?;
    let particles = posterior.sample(n_out, epoch, rng)?;
    Ok(Pgm2Output {
        posterior,
        particles,
        diagnostics,
    })
}
