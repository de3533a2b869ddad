//! Gaussian mixtures, particle ensembles, k-means++ clustering and the
//! particle-based entropy metric.

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Epoch;
use crate::harness::csv::num;
use crate::linalg::{log_sum_exp, regularize, robust_cholesky, standard_normal, weighted_moments, GaussianDensity, COV_EPSILON};
use crate::{par, Error, Result};

/// Lloyd iteration cap for [`cluster`].
pub const MAX_LLOYD_ITERATIONS: usize = 100;

/// Coordinate frame and units of a state vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    /// Earth-Moon rotating frame, nondimensional.
    Synodic,
    /// Topocentric ENU axes, nondimensional. All filter arithmetic happens here.
    Filter,
    /// Topocentric ENU axes in km and km/s.
    TopocentricKm,
    /// Abstract coordinates for surrogate problems.
    Unitless,
}

/// One mixture component. Fields are read-only so the density cache stays valid.
#[derive(Clone, Debug)]
pub struct Component<const D: usize> {
    weight: f64,
    cov: SMatrix<f64, D, D>,
    density: GaussianDensity<D>,
}

impl<const D: usize> Component<D> {
    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &SVector<f64, D> {
        &self.density.mean
    }

    pub fn cov(&self) -> &SMatrix<f64, D, D> {
        &self.cov
    }

    pub fn density(&self) -> &GaussianDensity<D> {
        &self.density
    }
}

/// Weighted sum of Gaussians. Weights are positive and sum to one.
#[derive(Clone, Debug)]
pub struct Gmm<const D: usize> {
    components: Vec<Component<D>>,
    pub frame: Frame,
}

impl<const D: usize> Gmm<D> {
    /// Builds a mixture from `(weight, mean, cov)` triples. Weights are
    /// renormalized; zero-weight components are dropped.
    pub fn new(parts: impl IntoIterator<Item = (f64, SVector<f64, D>, SMatrix<f64, D, D>)>, frame: Frame) -> Result<Self> {
        let parts: Vec<_> = parts.into_iter().collect();
        if parts.iter().any(|(w, _, _)| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be finite and non-negative".into()));
        }
        let total: f64 = parts.iter().map(|(w, _, _)| w).sum();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument("mixture has no positive weight".into()));
        }
        let mut components = Vec::with_capacity(parts.len());
        for (i, (w, mean, cov)) in parts.into_iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let cov = crate::linalg::symmetrize(&cov);
            let density = GaussianDensity::new(mean, &cov).map_err(|e| Error::component(i, e))?;
            components.push(Component {
                weight: w / total,
                cov,
                density,
            });
        }
        Ok(Self { components, frame })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[Component<D>] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Same components with new (renormalized) weights.
    pub fn with_weights(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.len() {
            return Err(Error::LengthMismatch {
                left: weights.len(),
                right: self.len(),
            });
        }
        Self::new(self.components.iter().zip(weights).map(|(c, &w)| (w, *c.mean(), c.cov)), self.frame)
    }

    /// Drops components with weight below `floor` and renormalizes.
    pub fn pruned(&self, floor: f64) -> Result<Self> {
        let kept: Vec<f64> = self
            .components
            .iter()
            .map(|c| if c.weight < floor { 0.0 } else { c.weight })
            .collect();
        self.with_weights(&kept)
    }

    /// Per-component `log w_j + log N(x; m_j, P_j)`.
    pub fn component_log_terms(&self, x: &SVector<f64, D>) -> Vec<f64> {
        self.components.iter().map(|c| c.weight.ln() + c.density.log_pdf(x)).collect()
    }

    pub fn log_pdf(&self, x: &SVector<f64, D>) -> f64 {
        log_sum_exp(&self.component_log_terms(x))
    }

    pub fn mean(&self) -> SVector<f64, D> {
        self.components.iter().map(|c| c.mean() * c.weight).sum()
    }

    /// Mixture covariance (within plus between component spread).
    pub fn cov(&self) -> SMatrix<f64, D, D> {
        let mean = self.mean();
        self.components
            .iter()
            .map(|c| {
                let d = c.mean() - mean;
                (c.cov + d * d.transpose()) * c.weight
            })
            .sum()
    }

    /// Categorical component draw followed by a Gaussian draw.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, epoch: Epoch, rng: &mut R) -> Result<ParticleEnsemble<D>> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        let factors: Vec<SMatrix<f64, D, D>> = self.components.iter().map(|c| c.density.factor()).collect();
        let mut cumulative = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight;
            cumulative.push(acc);
        }
        let states = (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                let j = cumulative.partition_point(|&c| c <= u).min(self.len() - 1);
                self.components[j].mean() + factors[j] * standard_normal::<D, R>(rng)
            })
            .collect();
        ParticleEnsemble::new(states, self.frame, epoch)
    }

    /// CSV block: one row per component with weight, mean and the
    /// lower-triangular covariance entries in row order.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("weight");
        for i in 0..D {
            out.push_str(&format!(",mean_{i}"));
        }
        for i in 0..D {
            for j in 0..=i {
                out.push_str(&format!(",cov_{i}{j}"));
            }
        }
        out.push('\n');
        for c in &self.components {
            out.push_str(&num(c.weight));
            for v in c.mean().iter() {
                out.push(',');
                out.push_str(&num(*v));
            }
            for i in 0..D {
                for j in 0..=i {
                    out.push(',');
                    out.push_str(&num(c.cov[(i, j)]));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, frame: Frame) -> Result<Self> {
        let width = 1 + D + D * (D + 1) / 2;
        let mut parts = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let vals: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("mixture row {line:?}: {e}")))?;
            if vals.len() != width {
                return Err(Error::Format(format!("mixture row has {} fields, expected {width}", vals.len())));
            }
            let mean = SVector::<f64, D>::from_column_slice(&vals[1..=D]);
            let mut cov = SMatrix::<f64, D, D>::zeros();
            let mut k = 1 + D;
            for i in 0..D {
                for j in 0..=i {
                    cov[(i, j)] = vals[k];
                    cov[(j, i)] = vals[k];
                    k += 1;
                }
            }
            parts.push((vals[0], mean, cov));
        }
        Self::new(parts, frame)
    }
}

/// Weighted particle cloud at a common epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble<const D: usize> {
    pub states: Vec<SVector<f64, D>>,
    pub weights: Vec<f64>,
    pub frame: Frame,
    pub epoch: Epoch,
}

impl<const D: usize> ParticleEnsemble<D> {
    /// Uniformly weighted ensemble.
    pub fn new(states: Vec<SVector<f64, D>>, frame: Frame, epoch: Epoch) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::TooFewParticles { needed: 1, got: 0 });
        }
        let w = 1.0 / states.len() as f64;
        Ok(Self {
            weights: vec![w; states.len()],
            states,
            frame,
            epoch,
        })
    }

    /// Ensemble with explicit weights, renormalized to sum to one.
    pub fn with_weights(states: Vec<SVector<f64, D>>, weights: Vec<f64>, frame: Frame, epoch: Epoch) -> Result<Self> {
        if states.len() != weights.len() {
            return Err(Error::LengthMismatch {
                left: states.len(),
                right: weights.len(),
            });
        }
        if states.is_empty() {
            return Err(Error::TooFewParticles { needed: 1, got: 0 });
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument(
                "particle weights must be non-negative with positive sum".into(),
            ));
        }
        Ok(Self {
            weights: weights.iter().map(|w| w / total).collect(),
            states,
            frame,
            epoch,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Weighted mean and population covariance.
    pub fn moments(&self) -> (SVector<f64, D>, SMatrix<f64, D, D>) {
        let (_, mean, cov) = weighted_moments(self.states.iter().zip(self.weights.iter().copied())).expect("ensemble weights sum to one");
        (mean, cov)
    }

    pub fn std_devs(&self) -> SVector<f64, D> {
        let (_, cov) = self.moments();
        SVector::from_fn(|i, _| cov[(i, i)].max(0.0).sqrt())
    }

    /// Per-coordinate `(min, max)` over the particles.
    pub fn bounds(&self) -> (SVector<f64, D>, SVector<f64, D>) {
        let mut lo = SVector::<f64, D>::from_element(f64::INFINITY);
        let mut hi = SVector::<f64, D>::from_element(f64::NEG_INFINITY);
        for s in &self.states {
            lo = lo.inf(s);
            hi = hi.sup(s);
        }
        (lo, hi)
    }
}

/// Fits one Gaussian to the listed members. The weight is the members' share
/// of the ensemble weight; the covariance follows the population convention
/// and receives `COV_EPSILON * I` when nearly singular.
pub fn fit_gaussian<const D: usize>(e: &ParticleEnsemble<D>, members: &[usize]) -> Result<(f64, SVector<f64, D>, SMatrix<f64, D, D>)> {
    if members.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let (weight, mean, cov) = weighted_moments(members.iter().map(|&i| (&e.states[i], e.weights[i]))).ok_or(Error::EmptyCluster)?;
    Ok((weight, mean, regularize(&cov, COV_EPSILON)))
}

/// Result of [`cluster_assign`]: the fitted mixture and each particle's
/// component index.
#[derive(Clone, Debug)]
pub struct Clustering<const D: usize> {
    pub gmm: Gmm<D>,
    pub assignments: Vec<usize>,
    /// Weighted within-cluster sum of squared distances in whitened coordinates.
    pub inertia: f64,
}

impl<const D: usize> Clustering<D> {
    /// Particle indices per component.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.gmm.len()];
        for (i, &a) in self.assignments.iter().enumerate() {
            out[a].push(i);
        }
        out
    }
}

fn nearest<const D: usize>(y: &SVector<f64, D>, centers: &[SVector<f64, D>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = (y - c).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ with Lloyd refinement in coordinates whitened by the global
/// ensemble covariance, followed by a Gaussian fit per cluster.
///
/// Clusters that stay empty (only possible when fewer than `k` distinct
/// points exist) are dropped, so the mixture can have fewer than `k`
/// components.
pub fn cluster_assign<const D: usize, R: Rng + ?Sized>(e: &ParticleEnsemble<D>, k: usize, rng: &mut R) -> Result<Clustering<D>> {
    if k == 0 {
        return Err(Error::InvalidArgument("cluster count must be at least 1".into()));
    }
    let n = e.len();
    if n < k {
        return Err(Error::TooFewParticles { needed: k, got: n });
    }
    let (mean, cov) = e.moments();
    let chol = robust_cholesky(&regularize(&cov, COV_EPSILON), "ensemble covariance")?;
    let l = chol.l();
    let white: Vec<SVector<f64, D>> = par::map(n, |i| {
        l.solve_lower_triangular(&(e.states[i] - mean))
            .expect("cholesky factor has a positive diagonal")
    });

    // k-means++ seeding, with D^2 sampling weighted by particle weight.
    let mut centers = Vec::with_capacity(k);
    centers.push(white[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = white.iter().map(|y| (y - centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let scores: Vec<f64> = d2.iter().zip(&e.weights).map(|(d, w)| d * w).collect();
        let total: f64 = scores.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = n - 1;
            for (i, s) in scores.iter().enumerate() {
                acc += s;
                if acc > u && *s > 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = white[pick];
        for (d, y) in d2.iter_mut().zip(&white) {
            *d = d.min((y - c).norm_squared());
        }
        centers.push(c);
    }

    let mut assignments: Vec<usize> = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let next: Vec<(usize, f64)> = par::map(n, |i| nearest(&white[i], &centers));
        let changed = next.iter().zip(&assignments).any(|((a, _), b)| a != b);
        assignments = next.iter().map(|(a, _)| *a).collect();
        if !changed {
            break;
        }
        let mut sums = vec![SVector::<f64, D>::zeros(); k];
        let mut mass = vec![0.0; k];
        for (i, &a) in assignments.iter().enumerate() {
            sums[a] += white[i] * e.weights[i];
            mass[a] += e.weights[i];
        }
        let mut dist: Vec<f64> = next.iter().map(|(_, d)| *d).collect();
        for j in 0..k {
            if mass[j] > 0.0 {
                centers[j] = sums[j] / mass[j];
            } else {
                // Reseed an empty cluster at the point farthest from its center.
                let (far, far_d) = dist
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &d)| if d > b.1 { (i, d) } else { b });
                if far_d > 0.0 {
                    centers[j] = white[far];
                    dist[far] = 0.0;
                }
            }
        }
    }

    let mut sums = vec![SVector::<f64, D>::zeros(); k];
    let mut mass = vec![0.0; k];
    let mut members = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        members[a].push(i);
        sums[a] += white[i] * e.weights[i];
        mass[a] += e.weights[i];
    }
    let inertia: f64 = assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| e.weights[i] * (white[i] - sums[a] / mass[a]).norm_squared())
        .sum();
    let mut relabel = vec![usize::MAX; k];
    let mut parts = Vec::with_capacity(k);
    for (j, m) in members.iter().enumerate() {
        if m.is_empty() {
            continue;
        }
        relabel[j] = parts.len();
        parts.push(fit_gaussian(e, m)?);
    }
    let assignments = assignments.into_iter().map(|a| relabel[a]).collect();
    Ok(Clustering {
        gmm: Gmm::new(parts, e.frame)?,
        assignments,
        inertia,
    })
}

/// Clustering with the component count picked by an elbow rule: the smallest
/// `k < k_max` for which going to `k + 1` clusters reduces the within-cluster
/// spread by less than `threshold` times the total (one-cluster) spread, else
/// `k_max`.
pub fn cluster_auto<const D: usize, R: Rng + ?Sized>(
    e: &ParticleEnsemble<D>,
    k_max: usize,
    threshold: f64,
    rng: &mut R,
) -> Result<Clustering<D>> {
    if k_max == 0 {
        return Err(Error::InvalidArgument("cluster count must be at least 1".into()));
    }
    let k_max = k_max.min(e.len());
    let mut current = cluster_assign(e, 1, rng)?;
    let total = current.inertia;
    for k in 1..k_max {
        let next = cluster_assign(e, k + 1, rng)?;
        if total <= 0.0 || (current.inertia - next.inertia) / total < threshold {
            return Ok(current);
        }
        current = next;
    }
    Ok(current)
}

/// Mixture of the `k` clusters found by [`cluster_assign`].
pub fn cluster<const D: usize, R: Rng + ?Sized>(e: &ParticleEnsemble<D>, k: usize, rng: &mut R) -> Result<Gmm<D>> {
    Ok(cluster_assign(e, k, rng)?.gmm)
}

/// `-(1/N) sum_i log p(x_i)`. Terms are summed in sorted order so the value
/// does not depend on particle order.
pub fn entropy<const D: usize>(e: &ParticleEnsemble<D>, g: &Gmm<D>) -> Result<f64> {
    if e.frame != g.frame {
        return Err(Error::FrameMismatch {
            expected: g.frame,
            found: e.frame,
        });
    }
    let mut logs = par::map(e.len(), |i| g.log_pdf(&e.states[i]));
    logs.sort_by(f64::total_cmp);
    Ok(-logs.iter().sum::<f64>() / e.len() as f64)
}

/// Axis-aligned uniform distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformBox<const D: usize> {
    pub lower: SVector<f64, D>,
    pub upper: SVector<f64, D>,
}

impl<const D: usize> UniformBox<D> {
    pub fn new(lower: SVector<f64, D>, upper: SVector<f64, D>) -> Result<Self> {
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidArgument("box lower bounds must be below upper bounds".into()));
        }
        Ok(Self { lower, upper })
    }

    /// Box symmetric about zero with the given half-widths.
    pub fn symmetric(half_width: SVector<f64, D>) -> Result<Self> {
        Self::new(-half_width, half_width)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, frame: Frame, epoch: Epoch, rng: &mut R) -> Result<ParticleEnsemble<D>> {
        let states = (0..n)
            .map(|_| SVector::from_fn(|i, _| rng.random_range(self.lower[i]..=self.upper[i])))
            .collect();
        ParticleEnsemble::new(states, frame, epoch)
    }

    pub fn contains(&self, x: &SVector<f64, D>) -> bool {
        (0..D).all(|i| self.lower[i] <= x[i] && x[i] <= self.upper[i])
    }

    /// `-log(volume)`.
    pub fn log_density(&self) -> f64 {
        -(0..D).map(|i| (self.upper[i] - self.lower[i]).ln()).sum::<f64>()
    }

    pub fn log_pdf(&self, x: &SVector<f64, D>) -> f64 {
        if self.contains(x) {
            self.log_density()
        } else {
            f64::NEG_INFINITY
        }
    }
}
