//! Ensemble Kalman measurement update of each mixture component.

use nalgebra::{SMatrix, SVector};
use rand::Rng;

use crate::gmm::{cluster_assign, Gmm, ParticleEnsemble};
use crate::harness::csv::num;
use crate::linalg::{regularize, standard_normal, weighted_moments, GaussianDensity, COV_EPSILON};
use crate::observation::ObservationModel;
use crate::pgm_core::update_weights;
use crate::{par, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pgm1Config {
    /// Mixture components fitted to the propagated cloud.
    pub n_clusters: usize,
    /// Components whose posterior weight falls below this are dropped.
    pub min_component_weight: f64,
}

impl Default for Pgm1Config {
    fn default() -> Self {
        Self {
            n_clusters: 96,
            min_component_weight: 1e-6,
        }
    }
}

impl Pgm1Config {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(Error::InvalidArgument("n_clusters must be at least 1".into()));
        }
        if !(0.0..=0.1).contains(&self.min_component_weight) {
            return Err(Error::InvalidArgument("min_component_weight must lie in [0, 0.1]".into()));
        }
        Ok(())
    }
}

/// Result of updating one component's members.
#[derive(Clone, Debug)]
pub struct EnkfUpdate<const D: usize> {
    pub members: Vec<SVector<f64, D>>,
    pub mean: SVector<f64, D>,
    pub cov: SMatrix<f64, D, D>,
    /// `log N(z; mean predicted measurement, P_zz)`.
    pub log_likelihood: f64,
    /// Mahalanobis norm of the innovation under `P_zz`.
    pub innovation_norm: f64,
}

/// Stochastic (perturbed-observation) ensemble Kalman update.
///
/// Cross and innovation covariances come from the members' predicted
/// measurements, with residuals formed by the model (so angles wrap). Each
/// member moves by `K (z + v_j - h(x_j))` with `v_j ~ N(0, R)`.
pub fn enkf_component_update<const D: usize, const M: usize, O, R>(
    members: &[SVector<f64, D>],
    obs: &O,
    rng: &mut R,
) -> Result<EnkfUpdate<D>>
where
    O: ObservationModel<D, M>,
    R: Rng + ?Sized,
{
    let n = members.len();
    if n < 2 {
        return Err(Error::TooFewParticles { needed: 2, got: n });
    }
    let predicted: Vec<SVector<f64, M>> = members
        .iter()
        .enumerate()
        .map(|(i, x)| obs.predict(x).map_err(|e| Error::particle(i, e)))
        .collect::<Result<_>>()?;

    let nf = n as f64;
    let x_mean: SVector<f64, D> = members.iter().sum::<SVector<f64, D>>() / nf;
    // Average measurement deviations about the first prediction so that a
    // cloud straddling the azimuth cut still gets a sensible mean.
    let anchor = predicted[0];
    let y_mean = anchor + predicted.iter().map(|y| obs.residual(y, &anchor)).sum::<SVector<f64, M>>() / nf;
    let mut pxz = SMatrix::<f64, D, M>::zeros();
    let mut szz = SMatrix::<f64, M, M>::zeros();
    for (x, y) in members.iter().zip(&predicted) {
        let dx = x - x_mean;
        let dy = obs.residual(y, &y_mean);
        pxz += dx * dy.transpose();
        szz += dy * dy.transpose();
    }
    pxz /= nf - 1.0;
    szz /= nf - 1.0;
    let pzz = szz + obs.noise_cov();
    let innov_density = GaussianDensity::new(SVector::<f64, M>::zeros(), &pzz).map_err(|_| Error::SingularInnovation)?;
    let pzz_inv = pzz.try_inverse().ok_or(Error::SingularInnovation)?;
    let gain = pxz * pzz_inv;

    let z = obs.measured();
    let noise_factor = obs.noise().factor();
    let updated: Vec<SVector<f64, D>> = members
        .iter()
        .zip(&predicted)
        .map(|(x, y)| {
            let v = noise_factor * standard_normal::<M, R>(rng);
            x + gain * obs.residual(&(z + v), y)
        })
        .collect();

    let (_, mean, cov) = weighted_moments(updated.iter().map(|x| (x, 1.0))).expect("at least two members");
    let innovation = obs.residual(&z, &y_mean);
    Ok(EnkfUpdate {
        mean,
        cov: regularize(&cov, COV_EPSILON),
        log_likelihood: innov_density.log_pdf_of(&innovation),
        innovation_norm: innov_density.mahalanobis_sq_of(&innovation).sqrt(),
        members: updated,
    })
}

/// Per-step bookkeeping written to the diagnostics file.
#[derive(Clone, Debug, PartialEq)]
pub struct Pgm1Diagnostics {
    pub step: usize,
    /// Posterior weight of each surviving component.
    pub weights: Vec<f64>,
    /// Innovation norm of each updated prior component, before pruning.
    pub innovation_norms: Vec<f64>,
}

impl Pgm1Diagnostics {
    pub const CSV_HEADER: &'static str = "step,n_components,weights,innovation_norms";

    /// One CSV row; list-valued fields are `;`-separated.
    pub fn to_csv_row(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| num(*x)).collect::<Vec<_>>().join(";");
        format!(
            "{},{},{},{}",
            self.step,
            self.weights.len(),
            join(&self.weights),
            join(&self.innovation_norms)
        )
    }
}

#[derive(Clone, Debug)]
pub struct Pgm1Output<const D: usize> {
    pub posterior: Gmm<D>,
    pub particles: ParticleEnsemble<D>,
    pub diagnostics: Pgm1Diagnostics,
}

/// One filter step: cluster the propagated particles, update each cluster
/// with its own members, reweight by the component likelihoods, prune and
/// resample `n_out` particles.
///
/// Clusters with a single member cannot support a covariance estimate and
/// are dropped before the weight update.
pub fn pgm1_step<const D: usize, const M: usize, O, R>(
    particles: &ParticleEnsemble<D>,
    obs: &O,
    cfg: &Pgm1Config,
    n_out: usize,
    step: usize,
    rng: &mut R,
) -> Result<Pgm1Output<D>>
where
    O: ObservationModel<D, M>,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let k = cfg.n_clusters.min(particles.len());
    let clustering = cluster_assign(particles, k, rng)?;
    let members = clustering.members();
    let prior_weights = clustering.gmm.weights();

    let base = par::fork_seed(rng);
    let updates: Vec<Option<EnkfUpdate<D>>> = par::try_map(members.len(), |j| {
        if members[j].len() < 2 {
            return Ok(None);
        }
        let xs: Vec<SVector<f64, D>> = members[j].iter().map(|&i| particles.states[i]).collect();
        let mut stream = par::stream_rng(base, j as u64);
        enkf_component_update(&xs, obs, &mut stream)
            .map(Some)
            .map_err(|e| Error::component(j, e))
    })?;

    let lls: Vec<f64> = updates
        .iter()
        .map(|u| u.as_ref().map_or(f64::NEG_INFINITY, |u| u.log_likelihood))
        .collect();
    let innovation_norms = updates.iter().map(|u| u.as_ref().map_or(f64::NAN, |u| u.innovation_norm)).collect();
    let weights = update_weights(&prior_weights, &lls)?;
    let parts: Vec<_> = updates
        .iter()
        .zip(&weights)
        .filter_map(|(u, &w)| u.as_ref().map(|u| (w, u.mean, u.cov)))
        .filter(|(w, _, _)| *w >= cfg.min_component_weight && *w > 0.0)
        .collect();
    if parts.is_empty() {
        return Err(Error::LossOfCustody {
            step,
            reason: "every mixture component fell below the pruning floor".into(),
        });
    }
    let posterior = Gmm::new(parts, particles.frame)?;
    let particles_out = posterior.sample(n_out, particles.epoch, rng)?;
    Ok(Pgm1Output {
        diagnostics: Pgm1Diagnostics {
            step,
            weights: posterior.weights(),
            innovation_norms,
        },
        posterior,
        particles: particles_out,
    })
}
