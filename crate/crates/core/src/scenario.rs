//! 9:2 NRHO truth trajectory, observation scheduling and prior construction.

use std::sync::OnceLock;

use nalgebra::{Matrix2, Vector2};
use rand::Rng;

use crate::dynamics::{jacobi_constant, propagate, propagate_to_event, Epoch, FrameChain, SynodicState, SystemParams, DEFAULT_TOL};
use crate::gmm::{cluster, Frame, Gmm, UniformBox};
use crate::harness::csv::{num, row};
use crate::observation::{diagonal_noise, measure, synthesize, visible, Measurement, VisibilityPolicy, DEFAULT_SIGMA_RAD};
use crate::{Error, Result, Vec6};

/// Southern 9:2 NRHO in the default system, starting at apolune on the
/// x-z plane. Refined by single shooting on perpendicular plane crossings.
pub const NRHO_INITIAL_STATE: [f64; 6] = [1.0221, 0.0, -0.182_150_821_220_806_4, 0.0, -0.103_427_263_213_338_75, 0.0];
/// Period of [`NRHO_INITIAL_STATE`] (nondimensional).
pub const NRHO_PERIOD: f64 = 1.512_145_540_030_784_2;
/// Largest accepted position/velocity mismatch after one period.
pub const CLOSURE_LIMIT: f64 = 1e-6;

/// Default half-widths of the initial box (km, km/s).
pub const BOX_HALF_WIDTH_KM: f64 = 550_000.0;
pub const BOX_HALF_WIDTH_KM_S: f64 = 100.0;

/// `|propagate(s, period) - s|`.
pub fn closure_error(s: &SynodicState, period: f64, p: &SystemParams, tol: f64) -> Result<f64> {
    Ok((propagate(s, period, p, tol)?.0 - s.0).norm())
}

/// The stored NRHO initial state and period, checked once by re-propagation.
pub fn default_nrho() -> Result<(SynodicState, f64)> {
    static CHECK: OnceLock<std::result::Result<f64, String>> = OnceLock::new();
    let s = SynodicState(Vec6::from_row_slice(&NRHO_INITIAL_STATE));
    let closure = CHECK.get_or_init(|| closure_error(&s, NRHO_PERIOD, &SystemParams::default(), DEFAULT_TOL).map_err(|e| e.to_string()));
    match closure {
        Ok(c) if *c < CLOSURE_LIMIT => Ok((s, NRHO_PERIOD)),
        Ok(c) => Err(Error::InvalidNrho {
            closure: *c,
            limit: CLOSURE_LIMIT,
        }),
        Err(msg) => Err(Error::InvalidArgument(format!("NRHO validation failed: {msg}"))),
    }
}

/// Half-period crossing of the x-z plane, returning `(time, state)`.
fn half_period_crossing(s: &SynodicState, p: &SystemParams, tol: f64) -> Result<(f64, SynodicState)> {
    propagate_to_event(s, 10.0, 1e-3, p, tol, |y| y[1])?.ok_or(Error::NoConvergence { iterations: 0 })
}

/// Single-shooting differential correction of a symmetric halo orbit.
///
/// Holds `x0` fixed and adjusts `z0` and `vy0` until the first x-z plane
/// crossing is perpendicular (`vx = vz = 0`). The 2x2 sensitivity matrix is
/// built by central differences. Returns the corrected state and full period.
pub fn refine_halo(x0: f64, z0: f64, vy0: f64, p: &SystemParams, tol: f64) -> Result<(SynodicState, f64)> {
    let crossing = |z: f64, vy: f64| -> Result<(Vector2<f64>, f64)> {
        let (t, s) = half_period_crossing(&SynodicState::new(x0, 0.0, z, 0.0, vy, 0.0), p, tol)?;
        Ok((Vector2::new(s.0[3], s.0[5]), t))
    };
    let mut u = Vector2::new(z0, vy0);
    for iteration in 0..50 {
        let (g, t_half) = crossing(u[0], u[1])?;
        if g.norm() < 1e-11 {
            return Ok((SynodicState::new(x0, 0.0, u[0], 0.0, u[1], 0.0), 2.0 * t_half));
        }
        let h = 1e-7;
        let mut jac = Matrix2::zeros();
        for j in 0..2 {
            let mut up = u;
            let mut um = u;
            up[j] += h;
            um[j] -= h;
            let col = (crossing(up[0], up[1])?.0 - crossing(um[0], um[1])?.0) / (2.0 * h);
            jac.set_column(j, &col);
        }
        let delta = jac.lu().solve(&g).ok_or(Error::NoConvergence { iterations: iteration })?;
        u -= delta;
    }
    Err(Error::NoConvergence { iterations: 50 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub nrho_initial: SynodicState,
    /// Time between measurements (nondimensional).
    pub cadence: f64,
    /// Longest pass to emit.
    pub max_steps: usize,
    /// Cadence steps scanned from epoch 0 for the first visible epoch.
    pub max_search_steps: usize,
    pub visibility: VisibilityPolicy,
    pub noise_cov: Matrix2<f64>,
    pub tol: f64,
}

impl ScenarioConfig {
    /// Stored NRHO, 40-minute cadence, 1 arcsecond noise, 15 degree mask.
    pub fn default_for(p: &SystemParams) -> Result<Self> {
        Ok(Self {
            nrho_initial: default_nrho()?.0,
            cadence: p.minutes_to_nondim(40.0),
            max_steps: 100,
            max_search_steps: 1_000,
            visibility: VisibilityPolicy::default(),
            noise_cov: diagonal_noise(DEFAULT_SIGMA_RAD, DEFAULT_SIGMA_RAD),
            tol: DEFAULT_TOL,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cadence > 0.0 && self.cadence.is_finite()) {
            return Err(Error::InvalidArgument("cadence must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be at least 1".into()));
        }
        if self.noise_cov.cholesky().is_none() {
            return Err(Error::NotPositiveDefinite {
                context: "measurement noise",
            });
        }
        Ok(())
    }
}

/// Truth and measurements for one pass, aligned by index.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioData {
    pub epochs: Vec<Epoch>,
    pub truth: Vec<SynodicState>,
    pub measurements: Vec<Measurement>,
}

impl ScenarioData {
    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn pass_start(&self) -> Option<Epoch> {
        self.epochs.first().copied()
    }

    pub fn pass_end(&self) -> Option<Epoch> {
        self.epochs.last().copied()
    }

    pub fn truth_csv(&self) -> String {
        let mut out = String::from("epoch_nondim,x,y,z,vx,vy,vz\n");
        for (e, s) in self.epochs.iter().zip(&self.truth) {
            out.push_str(&num(e.0));
            out.push(',');
            out.push_str(&row(s.0.iter().copied()));
            out.push('\n');
        }
        out
    }

    pub fn measurements_csv(&self) -> String {
        let mut out = String::from(Measurement::CSV_HEADER);
        out.push('\n');
        for m in &self.measurements {
            out.push_str(&m.to_csv_row());
            out.push('\n');
        }
        out
    }
}

/// Truth at `epoch`, always integrated from the initial state so samples
/// agree with one continuous propagation.
fn truth_at(cfg: &ScenarioConfig, epoch: Epoch, p: &SystemParams) -> Result<SynodicState> {
    propagate(&cfg.nrho_initial, epoch.0, p, cfg.tol)
}

/// Scans forward from epoch 0 at the cadence to the first visible epoch, then
/// emits noisy measurements while the target stays visible (up to
/// `max_steps`).
pub fn build_scenario<R: Rng + ?Sized>(cfg: &ScenarioConfig, p: &SystemParams, rng: &mut R) -> Result<ScenarioData> {
    cfg.validate()?;
    let chain = FrameChain::new(p);
    let topo = |k: usize| -> Result<(Epoch, SynodicState, crate::dynamics::TopocentricState)> {
        let e = Epoch(k as f64 * cfg.cadence);
        let s = truth_at(cfg, e, p)?;
        let t = chain.to_topocentric(&s, e);
        Ok((e, s, t))
    };
    let mut k = 0;
    loop {
        if k >= cfg.max_search_steps {
            return Err(Error::NeverVisible {
                searched_steps: cfg.max_search_steps,
            });
        }
        if visible(&topo(k)?.2, &cfg.visibility) {
            break;
        }
        k += 1;
    }
    let mut data = ScenarioData {
        epochs: Vec::new(),
        truth: Vec::new(),
        measurements: Vec::new(),
    };
    while data.len() < cfg.max_steps {
        let (e, s, t) = topo(k)?;
        if !visible(&t, &cfg.visibility) {
            break;
        }
        data.measurements.push(synthesize(&t, &cfg.noise_cov, e, rng)?);
        data.epochs.push(e);
        data.truth.push(s);
        k += 1;
    }
    Ok(data)
}

/// Default initial box (topocentric km, km/s).
pub fn default_box_km() -> UniformBox<6> {
    let (p, v) = (BOX_HALF_WIDTH_KM, BOX_HALF_WIDTH_KM_S);
    UniformBox::symmetric(Vec6::new(p, p, p, v, v, v)).expect("positive half-widths")
}

/// Rescales a topocentric km box into filter (nondimensional) units.
pub fn box_to_filter(b: &UniformBox<6>, p: &SystemParams) -> UniformBox<6> {
    let scale = Vec6::new(
        p.l_star_km,
        p.l_star_km,
        p.l_star_km,
        p.v_star_km_s(),
        p.v_star_km_s(),
        p.v_star_km_s(),
    );
    UniformBox {
        lower: b.lower.component_div(&scale),
        upper: b.upper.component_div(&scale),
    }
}

/// Samples the box and clusters the cloud into `k` Gaussians.
pub fn cluster_box_prior<R: Rng + ?Sized>(
    b: &UniformBox<6>,
    k: usize,
    n: usize,
    frame: Frame,
    epoch: Epoch,
    rng: &mut R,
) -> Result<Gmm<6>> {
    let cloud = b.sample(n, frame, epoch, rng)?;
    cluster(&cloud, k, rng)
}

/// Jacobi constant of the stored NRHO.
pub fn nrho_jacobi(p: &SystemParams) -> Result<f64> {
    jacobi_constant(&default_nrho()?.0, p)
}

/// Closest approach of the stored NRHO to the Moon, km, sampled at `n`
/// evenly spaced times over one period.
pub fn nrho_perilune_km(p: &SystemParams, n: usize) -> Result<f64> {
    let (s, period) = default_nrho()?;
    let moon = nalgebra::Vector3::new(1.0 - p.mu, 0.0, 0.0);
    let mut best = f64::INFINITY;
    let mut state = s;
    let dt = period / n.max(1) as f64;
    for _ in 0..n.max(1) {
        best = best.min((state.position() - moon).norm() * p.l_star_km);
        state = propagate(&state, dt, p, DEFAULT_TOL)?;
    }
    Ok(best)
}

/// Azimuth/elevation of the truth at each epoch, without noise.
pub fn clean_angles(data: &ScenarioData, p: &SystemParams) -> Result<Vec<(f64, f64)>> {
    let chain = FrameChain::new(p);
    data.epochs
        .iter()
        .zip(&data.truth)
        .map(|(e, s)| measure(&chain.to_topocentric(s, *e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stored_orbit_closes() {
        let (s, period) = default_nrho().unwrap();
        let c = closure_error(&s, period, &SystemParams::default(), DEFAULT_TOL).unwrap();
        assert!(c < CLOSURE_LIMIT, "{c}");
    }

    #[test]
    fn differential_correction_reproduces_stored_orbit() {
        let p = SystemParams::default();
        let (s, period) = refine_halo(1.0221, -0.18, -0.1, &p, DEFAULT_TOL).unwrap();
        let stored = default_nrho().unwrap();
        assert!((s.0 - stored.0 .0).norm() < 1e-8, "{:?}", s.0 - stored.0 .0);
        assert!((period - stored.1).abs() < 1e-8);
    }

    #[test]
    fn orbit_is_a_three_dimensional_nrho() {
        let p = SystemParams::default();
        let (s, period) = default_nrho().unwrap();
        assert!(s.0[2].abs() > 0.1);
        let moon = nalgebra::Vector3::new(1.0 - p.mu, 0.0, 0.0);
        let mut perilune = f64::INFINITY;
        for i in 0..2000 {
            let t = period * i as f64 / 2000.0;
            let x = propagate(&s, t, &p, 1e-11).unwrap();
            perilune = perilune.min((x.position() - moon).norm() * p.l_star_km);
        }
        assert!((1_500.0..17_000.0).contains(&perilune), "{perilune}");
        // Nine revolutions per two synodic months of about 29.5 days.
        let days = period * p.t_star_s / 86_400.0;
        assert!((days - 2.0 * 29.53 / 9.0).abs() < 0.1, "{days}");
    }

    #[test]
    fn emitted_measurements_respect_the_mask() {
        let p = SystemParams::default();
        let cfg = ScenarioConfig::default_for(&p).unwrap();
        let data = build_scenario(&cfg, &p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(!data.is_empty());
        for (el_clean, m) in clean_angles(&data, &p).unwrap().iter().map(|a| a.1).zip(&data.measurements) {
            assert!(el_clean >= cfg.visibility.min_elevation);
            assert!((m.el - el_clean).abs() < 6.0 * m.sigma_el());
        }
        for w in data.epochs.windows(2) {
            assert!((w[1].0 - w[0].0 - cfg.cadence).abs() < 1e-12);
        }
    }

    #[test]
    fn sub_moon_observer_sees_the_target_immediately() {
        let p = SystemParams {
            moon_hour_angle_rad: 0.0,
            observer_lat_rad: 0.0,
            ..SystemParams::default()
        };
        let (s, period) = default_nrho().unwrap();
        let cfg = ScenarioConfig {
            cadence: period / 1000.0,
            visibility: VisibilityPolicy { min_elevation: 0.0 },
            ..ScenarioConfig::default_for(&p).unwrap()
        };
        let _ = s;
        let data = build_scenario(&cfg, &p, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(!data.is_empty());
        assert_eq!(data.pass_start(), Some(Epoch(0.0)));
    }

    #[test]
    fn unreachable_mask_reports_never_visible() {
        let p = SystemParams::default();
        let cfg = ScenarioConfig {
            visibility: VisibilityPolicy { min_elevation: 1.5 },
            max_search_steps: 50,
            ..ScenarioConfig::default_for(&p).unwrap()
        };
        assert!(matches!(
            build_scenario(&cfg, &p, &mut ChaCha8Rng::seed_from_u64(3)),
            Err(Error::NeverVisible { searched_steps: 50 })
        ));
    }

    #[test]
    fn truth_matches_one_continuous_propagation() {
        let p = SystemParams::default();
        let cfg = ScenarioConfig::default_for(&p).unwrap();
        let data = build_scenario(&cfg, &p, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut s = propagate(&cfg.nrho_initial, data.epochs[0].0, &p, DEFAULT_TOL).unwrap();
        for i in 1..data.len() {
            s = propagate(&s, cfg.cadence, &p, DEFAULT_TOL).unwrap();
            assert!((s.0 - data.truth[i].0).norm() < 1e-9);
        }
    }

    #[test]
    fn synthesis_is_reproducible() {
        let p = SystemParams::default();
        let cfg = ScenarioConfig::default_for(&p).unwrap();
        let a = build_scenario(&cfg, &p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = build_scenario(&cfg, &p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.measurements_csv(), b.measurements_csv());
        assert_eq!(a.truth_csv(), b.truth_csv());
    }

    #[test]
    fn box_prior_mixture() {
        let b = box_to_filter(&default_box_km(), &SystemParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = cluster_box_prior(&b, 6, 100_000, Frame::Filter, Epoch(0.0), &mut rng).unwrap();
        assert_eq!(g.len(), 6);
        assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let widths = b.upper - b.lower;
        let mean = g.mean();
        let cov = g.cov();
        let mut expected_trace = 0.0;
        for i in 0..6 {
            let sd = widths[i] / 12f64.sqrt();
            assert!(mean[i].abs() < 4.0 * sd / (1e5f64).sqrt());
            expected_trace += sd * sd;
        }
        assert!((cov.trace() / expected_trace - 1.0).abs() < 0.05);
    }
}
