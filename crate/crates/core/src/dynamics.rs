//! Earth-Moon CR3BP dynamics, adaptive propagation and the frame chain between
//! the synodic barycentric frame and the observer's topocentric frame.
//!
//! Units: synodic states are nondimensional (Earth-Moon distance = 1, one time
//! unit = 1/mean motion). Topocentric states are km and km/s, relative to the
//! observer site with East-North-Up axes fixed to the rotating Earth. The
//! filter works in a third frame, topocentric axes with nondimensional units
//! (see [`FrameChain::synodic_to_filter`]).

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result, Vec6};

pub const EARTH_RADIUS_KM: f64 = 6378.137;
/// Default relative tolerance of [`propagate`].
pub const DEFAULT_TOL: f64 = 1e-12;
const MAX_STEPS: usize = 1_000_000;

/// Physical constants, observer site and epoch convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SystemParams {
    /// Moon / (Earth + Moon) mass ratio.
    pub mu: f64,
    pub l_star_km: f64,
    pub t_star_s: f64,
    pub omega_earth_rad_s: f64,
    pub observer_lat_rad: f64,
    pub observer_lon_rad: f64,
    pub observer_alt_km: f64,
    /// Hour angle of the Moon seen from the observer at epoch 0. Negative values
    /// put the Moon east of the meridian (rising).
    pub moon_hour_angle_rad: f64,
    /// Closest allowed approach to either primary (nondimensional).
    pub min_primary_distance: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            mu: 0.012_150_585_6,
            l_star_km: 384_400.0,
            t_star_s: 375_190.26,
            omega_earth_rad_s: 7.292_115_9e-5,
            observer_lat_rad: DEFAULT_OBSERVER_LAT_DEG.to_radians(),
            observer_lon_rad: DEFAULT_OBSERVER_LON_DEG.to_radians(),
            observer_alt_km: 0.1,
            moon_hour_angle_rad: DEFAULT_MOON_HOUR_ANGLE_DEG.to_radians(),
            min_primary_distance: 1e-9,
        }
    }
}

/// Default observer site (College Station, Texas), geodetic degrees.
pub const DEFAULT_OBSERVER_LAT_DEG: f64 = 30.62;
pub const DEFAULT_OBSERVER_LON_DEG: f64 = -96.34;

/// Default epoch-0 hour angle: the Moon is just below a 15 degree mask in the
/// east, so the first visible epoch starts a full pass.
pub const DEFAULT_MOON_HOUR_ANGLE_DEG: f64 = -80.0;

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.mu > 0.0 && self.mu < 0.5) {
            return bad("mu must lie in (0, 0.5)");
        }
        if !(self.l_star_km > 0.0 && self.t_star_s > 0.0 && self.omega_earth_rad_s > 0.0) {
            return bad("l_star, t_star and omega_earth must be positive");
        }
        if !(self.observer_lat_rad.abs() <= std::f64::consts::FRAC_PI_2) {
            return bad("observer latitude must lie in [-90, 90] degrees");
        }
        if !(self.min_primary_distance >= 0.0) {
            return bad("min_primary_distance must be non-negative");
        }
        Ok(())
    }

    /// Velocity unit in km/s.
    pub fn v_star_km_s(&self) -> f64 {
        self.l_star_km / self.t_star_s
    }

    /// Converts minutes to nondimensional time.
    pub fn minutes_to_nondim(&self, minutes: f64) -> f64 {
        minutes * 60.0 / self.t_star_s
    }
}

/// Nondimensional time since scenario start.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd)]
pub struct Epoch(pub f64);

/// CR3BP state in the synodic frame (nondimensional).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynodicState(pub Vec6);

/// Observer-centred state in km and km/s.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopocentricState(pub Vec6);

impl SynodicState {
    pub fn new(x: f64, y: f64, z: f64, vx: f64, vy: f64, vz: f64) -> Self {
        Self(Vec6::new(x, y, z, vx, vy, vz))
    }
    pub fn position(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into()
    }
    pub fn velocity(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into()
    }
    /// Distances to the Earth (r1) and the Moon (r2).
    pub fn primary_distances(&self, mu: f64) -> (f64, f64) {
        primary_distances(&self.0, mu)
    }
}

impl TopocentricState {
    pub fn position(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into()
    }
    pub fn velocity(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into()
    }
}

fn primary_distances(s: &Vec6, mu: f64) -> (f64, f64) {
    let (x, y, z) = (s[0], s[1], s[2]);
    let r1 = ((x + mu).powi(2) + y * y + z * z).sqrt();
    let r2 = ((x - 1.0 + mu).powi(2) + y * y + z * z).sqrt();
    (r1, r2)
}

fn check_distances(s: &Vec6, p: &SystemParams) -> Result<(f64, f64)> {
    let (r1, r2) = primary_distances(s, p.mu);
    // A massless second primary exerts no force, so only r1 matters then.
    let r2_ok = p.mu == 0.0 || r2 > p.min_primary_distance;
    if !(r1 > p.min_primary_distance && r2_ok) {
        return Err(Error::DegenerateState { r1, r2 });
    }
    Ok((r1, r2))
}

/// CR3BP acceleration in the synodic frame.
pub fn cr3bp_accel(s: &SynodicState, p: &SystemParams) -> Result<Vector3<f64>> {
    accel(&s.0, p)
}

fn accel(s: &Vec6, p: &SystemParams) -> Result<Vector3<f64>> {
    let (r1, r2) = check_distances(s, p)?;
    let mu = p.mu;
    let (x, y, z, vx, vy) = (s[0], s[1], s[2], s[3], s[4]);
    let k1 = (1.0 - mu) / (r1 * r1 * r1);
    let k2 = if mu == 0.0 { 0.0 } else { mu / (r2 * r2 * r2) };
    Ok(Vector3::new(
        x + 2.0 * vy - k1 * (x + mu) - k2 * (x - 1.0 + mu),
        y - 2.0 * vx - k1 * y - k2 * y,
        -k1 * z - k2 * z,
    ))
}

fn derivative(s: &Vec6, p: &SystemParams) -> Result<Vec6> {
    let a = accel(s, p)?;
    Ok(Vec6::new(s[3], s[4], s[5], a[0], a[1], a[2]))
}

/// Pseudo-potential `U* = (1-mu)/r1 + mu/r2 + (x^2 + y^2)/2`.
pub fn pseudo_potential(s: &SynodicState, p: &SystemParams) -> Result<f64> {
    let (r1, r2) = check_distances(&s.0, p)?;
    Ok((1.0 - p.mu) / r1 + p.mu / r2 + 0.5 * (s.0[0].powi(2) + s.0[1].powi(2)))
}

/// Jacobi constant `2 U* - v^2`.
pub fn jacobi_constant(s: &SynodicState, p: &SystemParams) -> Result<f64> {
    Ok(2.0 * pseudo_potential(s, p)? - s.velocity().norm_squared())
}

// Dormand-Prince 5(4) tableau. The force model is autonomous, so the stage
// times are not needed.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Adaptive Dormand-Prince 5(4) integrator for the CR3BP.
struct Dopri5<'a> {
    p: &'a SystemParams,
    rtol: f64,
    atol: f64,
}

struct StepResult {
    y: Vec6,
    dy: Vec6,
    err: f64,
}

impl<'a> Dopri5<'a> {
    fn new(p: &'a SystemParams, tol: f64) -> Self {
        Self { p, rtol: tol, atol: tol }
    }

    fn attempt(&self, y: &Vec6, k1: &Vec6, h: f64) -> Result<StepResult> {
        let p = self.p;
        let k2 = derivative(&(y + k1 * (h * A21)), p)?;
        let k3 = derivative(&(y + (k1 * A31 + k2 * A32) * h), p)?;
        let k4 = derivative(&(y + (k1 * A41 + k2 * A42 + k3 * A43) * h), p)?;
        let k5 = derivative(&(y + (k1 * A51 + k2 * A52 + k3 * A53 + k4 * A54) * h), p)?;
        let k6 = derivative(&(y + (k1 * A61 + k2 * A62 + k3 * A63 + k4 * A64 + k5 * A65) * h), p)?;
        let y_new = y + (k1 * B1 + k3 * B3 + k4 * B4 + k5 * B5 + k6 * B6) * h;
        let k7 = derivative(&y_new, p)?;
        let err_vec = (k1 * E1 + k3 * E3 + k4 * E4 + k5 * E5 + k6 * E6 + k7 * E7) * h;
        let mut acc = 0.0;
        for i in 0..6 {
            let scale = self.atol + self.rtol * y[i].abs().max(y_new[i].abs());
            acc += (err_vec[i] / scale).powi(2);
        }
        Ok(StepResult {
            y: y_new,
            dy: k7,
            err: (acc / 6.0).sqrt(),
        })
    }

    fn initial_step(&self, y: &Vec6, dy: &Vec6, span: f64) -> f64 {
        let mut d0 = 0.0;
        let mut d1 = 0.0;
        for i in 0..6 {
            let sc = self.atol + self.rtol * y[i].abs();
            d0 += (y[i] / sc).powi(2);
            d1 += (dy[i] / sc).powi(2);
        }
        let (d0, d1) = ((d0 / 6.0).sqrt(), (d1 / 6.0).sqrt());
        let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h.min(span.abs())
    }

    /// Integrates from `y0` over `dt`, calling `on_step(t, y)` after each
    /// accepted step. Returning `false` from the callback stops integration early.
    fn integrate(&self, y0: &Vec6, dt: f64, mut on_step: impl FnMut(f64, &Vec6, f64, &Vec6) -> bool) -> Result<(f64, Vec6)> {
        if dt == 0.0 {
            return Ok((0.0, *y0));
        }
        let dir = dt.signum();
        let mut t = 0.0;
        let mut y = *y0;
        let mut dy = derivative(&y, self.p)?;
        let mut h = self.initial_step(&y, &dy, dt) * dir;
        let mut steps = 0;
        while (dt - t) * dir > 0.0 {
            steps += 1;
            if steps > MAX_STEPS {
                return Err(Error::TooManySteps { t, max_steps: MAX_STEPS });
            }
            let remaining = dt - t;
            let last = h.abs() >= remaining.abs();
            if last {
                h = remaining;
            }
            if h.abs() <= 1e-15 * t.abs().max(1.0) && !last {
                return Err(Error::StepSizeUnderflow { t });
            }
            let step = self.attempt(&y, &dy, h)?;
            if !step.err.is_finite() {
                return Err(Error::NonFiniteState { t });
            }
            if step.err <= 1.0 {
                let t_prev = t;
                let y_prev = y;
                t = if last { dt } else { t + h };
                y = step.y;
                dy = step.dy;
                if !on_step(t_prev, &y_prev, t, &y) {
                    return Ok((t, y));
                }
                let fac = if step.err == 0.0 {
                    5.0
                } else {
                    (0.9 * step.err.powf(-0.2)).clamp(0.2, 5.0)
                };
                h *= fac;
            } else {
                h *= (0.9 * step.err.powf(-0.2)).clamp(0.1, 0.9);
            }
        }
        Ok((t, y))
    }
}

/// Propagates a synodic state by `dt` (either sign) with relative tolerance `tol`.
pub fn propagate(s: &SynodicState, dt: f64, p: &SystemParams, tol: f64) -> Result<SynodicState> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    if !dt.is_finite() {
        return Err(Error::InvalidArgument("duration must be finite".into()));
    }
    check_distances(&s.0, p)?;
    let (_, y) = Dopri5::new(p, tol).integrate(&s.0, dt, |_, _, _, _| true)?;
    Ok(SynodicState(y))
}

/// Propagates forward until `event(state)` changes sign, returning the elapsed
/// time and the state at the crossing. `min_time` suppresses crossings that
/// occur earlier (for example the one at the initial state).
pub fn propagate_to_event(
    s: &SynodicState,
    max_dt: f64,
    min_time: f64,
    p: &SystemParams,
    tol: f64,
    event: impl Fn(&Vec6) -> f64,
) -> Result<Option<(f64, SynodicState)>> {
    let integ = Dopri5::new(p, tol);
    let mut bracket = None;
    integ.integrate(&s.0, max_dt, |t0, y0, t1, y1| {
        let g0 = event(y0);
        // A step that starts exactly on the surface is not a crossing.
        if t1 >= min_time && g0 != 0.0 && g0.signum() != event(y1).signum() {
            bracket = Some((t0, *y0, t1));
            return false;
        }
        true
    })?;
    let Some((t0, y0, t1)) = bracket else {
        return Ok(None);
    };
    // Secant refinement on the event function using short re-propagations.
    let g0 = event(&y0);
    let (mut a, mut ga) = (0.0, g0);
    let mut b = t1 - t0;
    let mut yb = integ.integrate(&y0, b, |_, _, _, _| true)?.1;
    let mut gb = event(&yb);
    for _ in 0..60 {
        if gb == 0.0 || (b - a).abs() < 1e-15 {
            break;
        }
        let mut c = b - gb * (b - a) / (gb - ga);
        if !c.is_finite() || c <= a.min(b) || c >= a.max(b) {
            c = 0.5 * (a + b);
        }
        let yc = integ.integrate(&y0, c, |_, _, _, _| true)?.1;
        let gc = event(&yc);
        if gc.signum() == ga.signum() {
            a = c;
            ga = gc;
        } else {
            b = c;
            gb = gc;
            yb = yc;
        }
        if gc.abs() < 1e-15 {
            b = c;
            yb = yc;
            break;
        }
    }
    Ok(Some((t0 + b, SynodicState(yb))))
}

fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn z_cross(rate: f64, r: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(-rate * r[1], rate * r[0], 0.0)
}

/// Precomputed synodic <-> topocentric transformation for one set of parameters.
///
/// Chain (forward): dimensionalize, rotate the synodic frame into the
/// barycentric inertial frame, shift to the geocentre, rotate into the
/// Earth-fixed frame, subtract the observer site and project on East-North-Up.
/// The Earth's spin axis is taken normal to the Earth-Moon orbit plane.
#[derive(Clone, Debug)]
pub struct FrameChain {
    p: SystemParams,
    enu: Matrix3<f64>,
    site: Vector3<f64>,
    earth: Vector3<f64>,
    /// Spin angle of the Earth-fixed frame at epoch 0.
    spin0: f64,
    synodic_rate: f64,
}

impl FrameChain {
    pub fn new(p: &SystemParams) -> Self {
        let (slat, clat) = p.observer_lat_rad.sin_cos();
        let (slon, clon) = p.observer_lon_rad.sin_cos();
        let enu = Matrix3::new(-slon, clon, 0.0, -slat * clon, -slat * slon, clat, clat * clon, clat * slon, slat);
        let rad = EARTH_RADIUS_KM + p.observer_alt_km;
        let site = Vector3::new(rad * clat * clon, rad * clat * slon, rad * slat);
        Self {
            p: *p,
            enu,
            site,
            earth: Vector3::new(-p.mu * p.l_star_km, 0.0, 0.0),
            spin0: p.moon_hour_angle_rad - p.observer_lon_rad,
            synodic_rate: 1.0 / p.t_star_s,
        }
    }

    pub fn params(&self) -> &SystemParams {
        &self.p
    }

    /// Angle of the synodic x-axis measured in the Earth-fixed frame.
    fn relative_angle(&self, e: Epoch) -> f64 {
        let synodic = e.0;
        let spin = self.spin0 + self.p.omega_earth_rad_s * self.p.t_star_s * e.0;
        synodic - spin
    }

    fn rate_difference(&self) -> f64 {
        self.synodic_rate - self.p.omega_earth_rad_s
    }

    pub fn to_topocentric(&self, s: &SynodicState, e: Epoch) -> TopocentricState {
        let l = self.p.l_star_km;
        let v_unit = l / self.p.t_star_s;
        let rel = s.position() * l - self.earth;
        let vel = s.velocity() * v_unit;
        let rot = rot_z(self.relative_angle(e));
        let r_fixed = rot * rel;
        let v_fixed = rot * (vel + z_cross(self.rate_difference(), &rel));
        let r_t = self.enu * (r_fixed - self.site);
        let v_t = self.enu * v_fixed;
        TopocentricState(Vec6::new(r_t[0], r_t[1], r_t[2], v_t[0], v_t[1], v_t[2]))
    }

    pub fn to_synodic(&self, s: &TopocentricState, e: Epoch) -> SynodicState {
        let l = self.p.l_star_km;
        let v_unit = l / self.p.t_star_s;
        let r_fixed = self.enu.transpose() * s.position() + self.site;
        let v_fixed = self.enu.transpose() * s.velocity();
        let rot = rot_z(-self.relative_angle(e));
        let rel = rot * r_fixed;
        let vel = rot * v_fixed - z_cross(self.rate_difference(), &rel);
        let r = (rel + self.earth) / l;
        let v = vel / v_unit;
        SynodicState(Vec6::new(r[0], r[1], r[2], v[0], v[1], v[2]))
    }

    /// Topocentric km state to the filter frame (topocentric axes, nondimensional).
    pub fn topocentric_to_filter(&self, s: &TopocentricState) -> Vec6 {
        let l = self.p.l_star_km;
        let v = self.p.v_star_km_s();
        Vec6::new(s.0[0] / l, s.0[1] / l, s.0[2] / l, s.0[3] / v, s.0[4] / v, s.0[5] / v)
    }

    pub fn filter_to_topocentric(&self, x: &Vec6) -> TopocentricState {
        TopocentricState(scale_to_km(x, &self.p))
    }

    pub fn synodic_to_filter(&self, s: &SynodicState, e: Epoch) -> Vec6 {
        self.topocentric_to_filter(&self.to_topocentric(s, e))
    }

    pub fn filter_to_synodic(&self, x: &Vec6, e: Epoch) -> SynodicState {
        self.to_synodic(&self.filter_to_topocentric(x), e)
    }
}

/// Scales a filter-frame (nondimensional) vector to km and km/s.
pub fn scale_to_km(x: &Vec6, p: &SystemParams) -> Vec6 {
    let l = p.l_star_km;
    let v = p.v_star_km_s();
    Vec6::new(x[0] * l, x[1] * l, x[2] * l, x[3] * v, x[4] * v, x[5] * v)
}

pub fn synodic_to_topocentric(s: &SynodicState, e: Epoch, p: &SystemParams) -> TopocentricState {
    FrameChain::new(p).to_topocentric(s, e)
}

pub fn topocentric_to_synodic(s: &TopocentricState, e: Epoch, p: &SystemParams) -> SynodicState {
    FrameChain::new(p).to_synodic(s, e)
}
