//! Switching driver: MCMC updates for the first `switch_step` measurements,
//! ensemble Kalman updates afterwards, with per-step track records.

use nalgebra::SVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{scale_to_km, Epoch, FrameChain, SynodicState, SystemParams};
use crate::error::{Error, Result};
use crate::gmm::{cluster, entropy, Frame, Gmm, ParticleEnsemble, UniformBox};
use crate::harness::csv;
use crate::observation::{AnglesObservation, Measurement};
use crate::pgm1::{pgm1_step, Pgm1Config, Pgm1Diagnostics};
use crate::pgm2::{pgm2_step, ClusterConfig, McmcConfig, Pgm2Diagnostics, PriorComponent};
use crate::pgm_core::{propagate_ensemble, ProcessNoise};
use crate::Vec6;

/// Consistency threshold in standard deviations.
pub const CONSISTENCY_SIGMA: f64 = 4.0;

/// Which update runs at each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// MCMC updates up to the switch step, ensemble Kalman afterwards.
    Hybrid,
    /// Ensemble Kalman updates from the clustered box onwards.
    Pgm1Only,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Mode::Hybrid),
            "pgm1-only" | "pgm1_only" => Ok(Mode::Pgm1Only),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?}; expected hybrid or pgm1-only"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Hybrid => "hybrid",
            Mode::Pgm1Only => "pgm1-only",
        })
    }
}

/// Filter kind used at one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateKind {
    Pgm1,
    Pgm2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridConfig {
    /// Last step updated with MCMC; must be at least 2.
    pub switch_step: usize,
    /// Initial uniform prior in the filter frame, declared at the first
    /// measurement epoch.
    pub initial_box: UniformBox<6>,
    pub pgm1: Pgm1Config,
    pub mcmc: McmcConfig,
    pub cluster: ClusterConfig,
    /// Number of Gaussians fitted to the propagated cloud before an MCMC
    /// update, and to the box cloud for the first ensemble Kalman update.
    pub prior_clusters: usize,
    pub n_particles: usize,
    pub process_noise: ProcessNoise,
    /// Integrator tolerance for particle propagation.
    pub tol: f64,
}

impl HybridConfig {
    /// Defaults for the given box (filter units).
    pub fn with_box(initial_box: UniformBox<6>) -> Self {
        Self {
            switch_step: 2,
            initial_box,
            pgm1: Pgm1Config::default(),
            mcmc: McmcConfig::default(),
            cluster: ClusterConfig::default(),
            prior_clusters: 6,
            n_particles: 50_000,
            process_noise: ProcessNoise::default(),
            tol: 1e-10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |key: &str, message: String| Error::ConfigRange { key: key.into(), message };
        if self.switch_step < 2 {
            return Err(range("switch_step", format!("must be at least 2, got {}", self.switch_step)));
        }
        if self.prior_clusters == 0 {
            return Err(range("prior_clusters", "must be positive".into()));
        }
        if self.n_particles < 2 {
            return Err(range("n_particles", format!("must be at least 2, got {}", self.n_particles)));
        }
        if !(self.tol > 0.0) {
            return Err(range("tol", format!("must be positive, got {}", self.tol)));
        }
        self.pgm1.validate()?;
        self.mcmc.validate()?;
        self.process_noise.validate()
    }
}

/// Filter output after one measurement.
#[derive(Clone, Debug)]
pub struct TrackRecord {
    pub step: usize,
    pub epoch: Epoch,
    pub kind: UpdateKind,
    /// Posterior mixture in the filter frame.
    pub posterior: Gmm<6>,
    /// Particle entropy estimate, nats.
    pub entropy: f64,
    /// Particle-cloud standard deviations, km and km/s.
    pub std_km: Vec6,
    /// Particle-cloud mean, filter frame.
    pub particle_mean: Vec6,
    /// Truth in the filter frame.
    pub truth: Vec6,
    pub consistent: bool,
}

impl TrackRecord {
    pub const CSV_HEADER: &'static str =
        "step,epoch_nondim,update,entropy_nats,sd_x_km,sd_y_km,sd_z_km,sd_vx_km_s,sd_vy_km_s,sd_vz_km_s,consistent";

    pub fn to_csv_row(&self) -> String {
        let kind = match self.kind {
            UpdateKind::Pgm1 => "pgm1",
            UpdateKind::Pgm2 => "pgm2",
        };
        format!(
            "{},{},{},{},{},{}",
            self.step,
            csv::num(self.epoch.0),
            kind,
            csv::num(self.entropy),
            csv::row(self.std_km.iter().copied()),
            u8::from(self.consistent)
        )
    }
}

/// Why a run stopped early.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub reason: String,
}

/// Full history of one run.
#[derive(Clone, Debug)]
pub struct RunHistory {
    pub mode: Mode,
    /// Standard deviations of the initial box, km and km/s.
    pub initial_std_km: Vec6,
    pub records: Vec<TrackRecord>,
    pub pgm1_diagnostics: Vec<Pgm1Diagnostics>,
    pub pgm2_diagnostics: Vec<Pgm2Diagnostics>,
    /// Set when the filter lost custody and the run stopped.
    pub divergence: Option<Divergence>,
}

impl RunHistory {
    /// First step whose record fails the consistency check, or the step at
    /// which the run diverged.
    pub fn first_inconsistent_step(&self) -> Option<usize> {
        self.records
            .iter()
            .find(|r| !r.consistent)
            .map(|r| r.step)
            .or_else(|| self.divergence.as_ref().map(|d| d.step))
    }

    /// True when every step was processed and every record is consistent.
    pub fn custody_held(&self) -> bool {
        self.first_inconsistent_step().is_none()
    }

    pub fn track_csv(&self) -> String {
        let mut out = String::from(TrackRecord::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.to_csv_row());
            out.push('\n');
        }
        out
    }
}

/// Standard deviations of a uniform box, converted to km and km/s.
pub fn box_std_km(b: &UniformBox<6>, p: &SystemParams) -> Vec6 {
    let sd = (b.upper - b.lower) / 12f64.sqrt();
    scale_to_km(&sd, p)
}

/// True when the truth is within 4 Mahalanobis units of some posterior
/// component, or inside the particle mean plus or minus 4 standard
/// deviations on every axis.
pub fn consistency(posterior: &Gmm<6>, particle_mean: &Vec6, particle_std: &Vec6, truth: &Vec6) -> bool {
    let near_component = posterior
        .components()
        .iter()
        .map(|c| c.density().mahalanobis_sq(truth))
        .any(|d2| d2 < CONSISTENCY_SIGMA * CONSISTENCY_SIGMA);
    let in_box = (0..6).all(|i| (truth[i] - particle_mean[i]).abs() <= CONSISTENCY_SIGMA * particle_std[i]);
    near_component || in_box
}

/// Processes a measurement sequence with the chosen update schedule.
///
/// `truth[k]` must be the synodic truth at `measurements[k].epoch`. A loss of
/// custody inside an update ends the run; the history up to that point is
/// returned with [`RunHistory::divergence`] set. Other errors abort the run.
pub fn run_filter<R: Rng + ?Sized>(
    mode: Mode,
    measurements: &[Measurement],
    truth: &[SynodicState],
    cfg: &HybridConfig,
    p: &SystemParams,
    rng: &mut R,
) -> Result<RunHistory> {
    cfg.validate()?;
    if measurements.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: measurements.len(),
            right: truth.len(),
        });
    }
    if measurements.windows(2).any(|w| !(w[1].epoch.0 > w[0].epoch.0)) {
        return Err(Error::InvalidArgument("measurements must be strictly time-ordered".into()));
    }
    let chain = FrameChain::new(p);
    let mut history = RunHistory {
        mode,
        initial_std_km: box_std_km(&cfg.initial_box, p),
        records: Vec::with_capacity(measurements.len()),
        pgm1_diagnostics: Vec::new(),
        pgm2_diagnostics: Vec::new(),
        divergence: None,
    };
    let mut particles: Option<ParticleEnsemble<6>> = None;

    for (k, (z, s)) in measurements.iter().zip(truth).enumerate() {
        let step = k + 1;
        let obs = AnglesObservation::new(z.clone(), p.l_star_km)?;
        let epoch = z.epoch;
        let prior = match particles.take() {
            None => None,
            Some(e) => Some(propagate_ensemble(
                &e,
                epoch.0 - e.epoch.0,
                &chain,
                &cfg.process_noise,
                cfg.tol,
                rng,
            )?),
        };
        let use_mcmc = mode == Mode::Hybrid && step <= cfg.switch_step;
        let outcome = if use_mcmc {
            let priors = match &prior {
                None => vec![PriorComponent::Uniform(cfg.initial_box.clone())],
                Some(e) => PriorComponent::from_gmm(&cluster(e, cfg.prior_clusters, rng)?),
            };
            pgm2_step(
                &priors,
                &obs,
                &cfg.mcmc,
                &cfg.cluster,
                cfg.n_particles,
                Frame::Filter,
                epoch,
                step,
                rng,
            )
            .map(|out| {
                history.pgm2_diagnostics.extend(out.diagnostics);
                (out.posterior, out.particles, UpdateKind::Pgm2)
            })
        } else {
            let (cloud, pgm1_cfg) = match prior {
                Some(e) => (e, cfg.pgm1),
                None => {
                    let cloud = cfg.initial_box.sample(cfg.n_particles, Frame::Filter, epoch, rng)?;
                    let pgm1_cfg = Pgm1Config {
                        n_clusters: cfg.prior_clusters,
                        ..cfg.pgm1
                    };
                    (cloud, pgm1_cfg)
                }
            };
            pgm1_step(&cloud, &obs, &pgm1_cfg, cfg.n_particles, step, rng).map(|out| {
                history.pgm1_diagnostics.push(out.diagnostics);
                (out.posterior, out.particles, UpdateKind::Pgm1)
            })
        };
        let (posterior, cloud, kind) = match outcome {
            Ok(v) => v,
            Err(e) if e.is_loss_of_custody() => {
                history.divergence = Some(Divergence {
                    step,
                    reason: e.to_string(),
                });
                return Ok(history);
            }
            Err(e) => return Err(e),
        };
        let truth_filter = chain.synodic_to_filter(s, epoch);
        let (mean, _) = cloud.moments();
        let sd = cloud.std_devs();
        history.records.push(TrackRecord {
            step,
            epoch,
            kind,
            entropy: entropy(&cloud, &posterior)?,
            std_km: scale_to_km(&sd, p),
            particle_mean: mean,
            truth: truth_filter,
            consistent: consistency(&posterior, &mean, &sd, &truth_filter),
            posterior,
        });
        particles = Some(cloud);
    }
    Ok(history)
}

/// Hybrid schedule: MCMC through `cfg.switch_step`, ensemble Kalman after.
pub fn run_hybrid<R: Rng + ?Sized>(
    measurements: &[Measurement],
    truth: &[SynodicState],
    cfg: &HybridConfig,
    p: &SystemParams,
    rng: &mut R,
) -> Result<RunHistory> {
    run_filter(Mode::Hybrid, measurements, truth, cfg, p, rng)
}

/// Ensemble Kalman updates throughout, starting from the clustered box.
pub fn run_pgm1_only<R: Rng + ?Sized>(
    measurements: &[Measurement],
    truth: &[SynodicState],
    cfg: &HybridConfig,
    p: &SystemParams,
    rng: &mut R,
) -> Result<RunHistory> {
    run_filter(Mode::Pgm1Only, measurements, truth, cfg, p, rng)
}

/// Per-coordinate ratio of initial to final standard deviation.
pub fn shrink_factors(initial: &Vec6, last: &Vec6) -> Vec6 {
    SVector::from_fn(|i, _| initial[i] / last[i])
}
