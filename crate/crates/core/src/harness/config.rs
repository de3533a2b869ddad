//! Run configuration: a TOML file whose physical keys carry unit suffixes.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected so that a misspelled key never silently falls back to its
//! default.

use std::path::{Path, PathBuf};

use nalgebra::SVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{SystemParams, DEFAULT_MOON_HOUR_ANGLE_DEG, DEFAULT_OBSERVER_LAT_DEG, DEFAULT_OBSERVER_LON_DEG, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::gmm::UniformBox;
use crate::hybrid::{HybridConfig, Mode};
use crate::observation::{diagonal_noise, VisibilityPolicy, DEFAULT_MIN_ELEVATION_DEG};
use crate::pgm1::Pgm1Config;
use crate::pgm2::{ClusterConfig, McmcConfig};
use crate::pgm_core::ProcessNoise;
use crate::scenario::{box_to_filter, default_nrho, ScenarioConfig, BOX_HALF_WIDTH_KM, BOX_HALF_WIDTH_KM_S};

pub const DEFAULT_SEED: u64 = 1;

const ARCSEC_TO_RAD: f64 = std::f64::consts::PI / (180.0 * 3600.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub output: OutputSection,
    pub system: SystemSection,
    pub scenario: ScenarioSection,
    pub filter: FilterSection,
    pub mcmc: McmcSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Also render the entropy curve as SVG.
    pub svg: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub mu: f64,
    pub l_star_km: f64,
    pub t_star_s: f64,
    pub omega_earth_rad_s: f64,
    pub observer_lat_deg: f64,
    pub observer_lon_deg: f64,
    pub observer_alt_km: f64,
    pub moon_hour_angle_deg: f64,
    pub min_primary_distance_nondim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub cadence_minutes: f64,
    pub max_steps: usize,
    pub max_search_steps: usize,
    pub min_elevation_deg: f64,
    pub sigma_az_arcsec: f64,
    pub sigma_el_arcsec: f64,
    pub truth_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub switch_step: usize,
    pub n_particles: usize,
    pub prior_clusters: usize,
    pub pgm1_clusters: usize,
    pub min_component_weight: f64,
    pub process_noise_pos_nondim: f64,
    pub process_noise_vel_nondim: f64,
    pub propagation_tol: f64,
    pub box_half_width_km: f64,
    pub box_half_width_km_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSection {
    pub n_chains: usize,
    pub chain_length: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub proposal_scale: f64,
    pub pilot_draws: usize,
    pub max_init_attempts: usize,
    pub max_components: usize,
    pub elbow_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            mode: Mode::Hybrid,
            threads: 0,
            output: OutputSection::default(),
            system: SystemSection::default(),
            scenario: ScenarioSection::default(),
            filter: FilterSection::default(),
            mcmc: McmcSection::default(),
        }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            svg: false,
        }
    }
}

impl Default for SystemSection {
    fn default() -> Self {
        let p = SystemParams::default();
        Self {
            mu: p.mu,
            l_star_km: p.l_star_km,
            t_star_s: p.t_star_s,
            omega_earth_rad_s: p.omega_earth_rad_s,
            observer_lat_deg: DEFAULT_OBSERVER_LAT_DEG,
            observer_lon_deg: DEFAULT_OBSERVER_LON_DEG,
            observer_alt_km: p.observer_alt_km,
            moon_hour_angle_deg: DEFAULT_MOON_HOUR_ANGLE_DEG,
            min_primary_distance_nondim: p.min_primary_distance,
        }
    }
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            cadence_minutes: 40.0,
            max_steps: 100,
            max_search_steps: 1_000,
            min_elevation_deg: DEFAULT_MIN_ELEVATION_DEG,
            sigma_az_arcsec: 1.0,
            sigma_el_arcsec: 1.0,
            truth_tol: DEFAULT_TOL,
        }
    }
}

impl Default for FilterSection {
    fn default() -> Self {
        let pgm1 = Pgm1Config::default();
        let q = ProcessNoise::default();
        Self {
            switch_step: 2,
            n_particles: 50_000,
            prior_clusters: 6,
            pgm1_clusters: pgm1.n_clusters,
            min_component_weight: pgm1.min_component_weight,
            process_noise_pos_nondim: q.pos_sigma,
            process_noise_vel_nondim: q.vel_sigma,
            propagation_tol: 1e-10,
            box_half_width_km: BOX_HALF_WIDTH_KM,
            box_half_width_km_s: BOX_HALF_WIDTH_KM_S,
        }
    }
}

impl Default for McmcSection {
    fn default() -> Self {
        let m = McmcConfig::default();
        let c = ClusterConfig::default();
        Self {
            n_chains: m.n_chains,
            chain_length: m.chain_length,
            burn_in: m.burn_in,
            thin: m.thin,
            proposal_scale: m.proposal_scale,
            pilot_draws: m.pilot_draws,
            max_init_attempts: m.max_init_attempts,
            max_components: c.max_components,
            elbow_threshold: c.elbow_threshold,
        }
    }
}

/// Typed configurations for every module, built from a validated file.
#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    pub system: SystemParams,
    pub scenario: ScenarioConfig,
    pub filter: HybridConfig,
}

fn range_err(key: &str, message: impl Into<String>) -> Error {
    Error::ConfigRange {
        key: key.to_string(),
        message: message.into(),
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(range_err(key, format!("must be positive and finite, got {v}")))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(range_err(key, format!("must be at least {min}, got {v}")))
    }
}

impl RunConfig {
    /// Parses TOML text. Parse errors carry the line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let message = e.to_string();
            if message.contains("unknown field") {
                Error::ConfigUnknownKey(message)
            } else {
                Error::ConfigParse(message)
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Full configuration as TOML, every key written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable as TOML")
    }

    /// SHA-256 of the canonical TOML dump, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Checks every key against its allowed range.
    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    /// Converts units and builds the typed module configurations.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let s = &self.system;
        positive("system.l_star_km", s.l_star_km)?;
        positive("system.t_star_s", s.t_star_s)?;
        positive("system.omega_earth_rad_s", s.omega_earth_rad_s)?;
        if !(s.mu > 0.0 && s.mu < 0.5) {
            return Err(range_err("system.mu", format!("must lie in (0, 0.5), got {}", s.mu)));
        }
        if !(s.observer_lat_deg.abs() <= 90.0) {
            return Err(range_err(
                "system.observer_lat_deg",
                format!("must lie in [-90, 90], got {}", s.observer_lat_deg),
            ));
        }
        for (key, v) in [
            ("system.observer_lon_deg", s.observer_lon_deg),
            ("system.observer_alt_km", s.observer_alt_km),
            ("system.moon_hour_angle_deg", s.moon_hour_angle_deg),
        ] {
            if !v.is_finite() {
                return Err(range_err(key, "must be finite"));
            }
        }
        if !(s.min_primary_distance_nondim >= 0.0) {
            return Err(range_err("system.min_primary_distance_nondim", "must be non-negative"));
        }
        let system = SystemParams {
            mu: s.mu,
            l_star_km: s.l_star_km,
            t_star_s: s.t_star_s,
            omega_earth_rad_s: s.omega_earth_rad_s,
            observer_lat_rad: s.observer_lat_deg.to_radians(),
            observer_lon_rad: s.observer_lon_deg.to_radians(),
            observer_alt_km: s.observer_alt_km,
            moon_hour_angle_rad: s.moon_hour_angle_deg.to_radians(),
            min_primary_distance: s.min_primary_distance_nondim,
        };

        let sc = &self.scenario;
        positive("scenario.cadence_minutes", sc.cadence_minutes)?;
        at_least("scenario.max_steps", sc.max_steps, 1)?;
        at_least("scenario.max_search_steps", sc.max_search_steps, 1)?;
        if !(sc.min_elevation_deg.abs() <= 90.0) {
            return Err(range_err(
                "scenario.min_elevation_deg",
                format!("must lie in [-90, 90], got {}", sc.min_elevation_deg),
            ));
        }
        positive("scenario.sigma_az_arcsec", sc.sigma_az_arcsec)?;
        positive("scenario.sigma_el_arcsec", sc.sigma_el_arcsec)?;
        positive("scenario.truth_tol", sc.truth_tol)?;
        let scenario = ScenarioConfig {
            nrho_initial: default_nrho()?.0,
            cadence: system.minutes_to_nondim(sc.cadence_minutes),
            max_steps: sc.max_steps,
            max_search_steps: sc.max_search_steps,
            visibility: VisibilityPolicy {
                min_elevation: sc.min_elevation_deg.to_radians(),
            },
            noise_cov: diagonal_noise(sc.sigma_az_arcsec * ARCSEC_TO_RAD, sc.sigma_el_arcsec * ARCSEC_TO_RAD),
            tol: sc.truth_tol,
        };

        let f = &self.filter;
        at_least("filter.switch_step", f.switch_step, 2)?;
        at_least("filter.n_particles", f.n_particles, 2)?;
        at_least("filter.prior_clusters", f.prior_clusters, 1)?;
        at_least("filter.pgm1_clusters", f.pgm1_clusters, 1)?;
        if !(0.0..=0.1).contains(&f.min_component_weight) {
            return Err(range_err(
                "filter.min_component_weight",
                format!("must lie in [0, 0.1], got {}", f.min_component_weight),
            ));
        }
        for (key, v) in [
            ("filter.process_noise_pos_nondim", f.process_noise_pos_nondim),
            ("filter.process_noise_vel_nondim", f.process_noise_vel_nondim),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(range_err(key, format!("must be non-negative and finite, got {v}")));
            }
        }
        positive("filter.propagation_tol", f.propagation_tol)?;
        positive("filter.box_half_width_km", f.box_half_width_km)?;
        positive("filter.box_half_width_km_s", f.box_half_width_km_s)?;

        let m = &self.mcmc;
        at_least("mcmc.n_chains", m.n_chains, 1)?;
        at_least("mcmc.thin", m.thin, 1)?;
        at_least("mcmc.pilot_draws", m.pilot_draws, 2)?;
        at_least("mcmc.max_init_attempts", m.max_init_attempts, 1)?;
        at_least("mcmc.max_components", m.max_components, 1)?;
        if m.burn_in >= m.chain_length {
            return Err(range_err(
                "mcmc.burn_in",
                format!("must be below chain_length ({}), got {}", m.chain_length, m.burn_in),
            ));
        }
        if m.chain_length - m.burn_in < m.thin {
            return Err(range_err("mcmc.thin", "leaves no retained samples after burn-in"));
        }
        positive("mcmc.proposal_scale", m.proposal_scale)?;
        if !(m.elbow_threshold >= 0.0 && m.elbow_threshold.is_finite()) {
            return Err(range_err(
                "mcmc.elbow_threshold",
                format!("must be non-negative, got {}", m.elbow_threshold),
            ));
        }

        let (pw, vw) = (f.box_half_width_km, f.box_half_width_km_s);
        let box_km = UniformBox::symmetric(SVector::<f64, 6>::new(pw, pw, pw, vw, vw, vw))?;
        let filter = HybridConfig {
            switch_step: f.switch_step,
            initial_box: box_to_filter(&box_km, &system),
            pgm1: Pgm1Config {
                n_clusters: f.pgm1_clusters,
                min_component_weight: f.min_component_weight,
            },
            mcmc: McmcConfig {
                n_chains: m.n_chains,
                chain_length: m.chain_length,
                burn_in: m.burn_in,
                thin: m.thin,
                proposal_scale: m.proposal_scale,
                pilot_draws: m.pilot_draws,
                max_init_attempts: m.max_init_attempts,
            },
            cluster: ClusterConfig {
                max_components: m.max_components,
                elbow_threshold: m.elbow_threshold,
            },
            prior_clusters: f.prior_clusters,
            n_particles: f.n_particles,
            process_noise: ProcessNoise {
                pos_sigma: f.process_noise_pos_nondim,
                vel_sigma: f.process_noise_vel_nondim,
            },
            tol: f.propagation_tol,
        };
        system.validate()?;
        scenario.validate()?;
        filter.validate()?;
        Ok(ResolvedConfig { system, scenario, filter })
    }
}
