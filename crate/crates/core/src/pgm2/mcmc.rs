//! Random-walk Metropolis sampling.

use nalgebra::{SMatrix, SVector};
use rand::Rng;

use crate::linalg::{robust_cholesky, standard_normal};
use crate::{Error, Result};

/// Output of [`metropolis_chain`].
#[derive(Clone, Debug)]
pub struct Chain<const D: usize> {
    /// States after each of the `n` proposals (the initial state is not included).
    pub states: Vec<SVector<f64, D>>,
    pub log_targets: Vec<f64>,
    pub accepted: usize,
}

impl<const D: usize> Chain<D> {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.states.len().max(1) as f64
    }
}

/// Random-walk Metropolis with a Gaussian proposal `N(x, proposal_cov)`.
///
/// A proposal `y` is accepted with probability `min(1, exp(t(y) - t(x)))`.
pub fn metropolis_chain<const D: usize, T, R>(
    target: T,
    init: &SVector<f64, D>,
    proposal_cov: &SMatrix<f64, D, D>,
    n: usize,
    rng: &mut R,
) -> Result<Chain<D>>
where
    T: Fn(&SVector<f64, D>) -> f64,
    R: Rng + ?Sized,
{
    let l = robust_cholesky(proposal_cov, "proposal covariance")?.l();
    let mut x = *init;
    let mut tx = target(&x);
    if !(tx > f64::NEG_INFINITY) {
        return Err(Error::InitOutsideSupport);
    }
    let mut chain = Chain {
        states: Vec::with_capacity(n),
        log_targets: Vec::with_capacity(n),
        accepted: 0,
    };
    for _ in 0..n {
        let (nx, ntx, acc) = metropolis_step(&target, &x, tx, &l, rng);
        x = nx;
        tx = ntx;
        chain.accepted += acc as usize;
        chain.states.push(x);
        chain.log_targets.push(tx);
    }
    Ok(chain)
}

/// One Metropolis transition with proposal factor `l`.
pub(crate) fn metropolis_step<const D: usize, T, R>(
    target: &T,
    x: &SVector<f64, D>,
    tx: f64,
    l: &SMatrix<f64, D, D>,
    rng: &mut R,
) -> (SVector<f64, D>, f64, bool)
where
    T: Fn(&SVector<f64, D>) -> f64,
    R: Rng + ?Sized,
{
    let y = x + l * standard_normal::<D, R>(rng);
    let ty = target(&y);
    let log_ratio = ty - tx;
    // Compare in log space; a -inf proposal is always rejected.
    if ty > f64::NEG_INFINITY && (log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio) {
        (y, ty, true)
    } else {
        (*x, tx, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix1, Vector1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_target_with_inside_proposals_always_accepts() {
        let target = |x: &Vector1<f64>| if x[0].abs() <= 1e6 { 0.0 } else { f64::NEG_INFINITY };
        let c = metropolis_chain(
            target,
            &Vector1::new(0.0),
            &Matrix1::new(1e-4),
            10_000,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(c.accepted, 10_000);
    }

    #[test]
    fn init_outside_support_is_rejected() {
        let target = |_: &Vector1<f64>| f64::NEG_INFINITY;
        assert!(matches!(
            metropolis_chain(
                target,
                &Vector1::new(0.0),
                &Matrix1::new(1.0),
                10,
                &mut ChaCha8Rng::seed_from_u64(1)
            ),
            Err(Error::InitOutsideSupport)
        ));
    }

    #[test]
    fn chains_are_reproducible() {
        let target = |x: &Vector1<f64>| -0.5 * x[0] * x[0];
        let run = |s| {
            metropolis_chain(
                target,
                &Vector1::new(0.3),
                &Matrix1::new(1.0),
                500,
                &mut ChaCha8Rng::seed_from_u64(s),
            )
            .unwrap()
            .states
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn separated_modes_need_several_chains() {
        // Equal-weight modes at -20 and +20 with unit width.
        let target = |x: &Vector1<f64>| {
            let a = -0.5 * (x[0] + 20.0).powi(2);
            let b = -0.5 * (x[0] - 20.0).powi(2);
            a.max(b) + (1.0 + (-(a - b).abs()).exp()).ln()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let single = metropolis_chain(target, &Vector1::new(-20.0), &Matrix1::new(0.5), 20_000, &mut rng).unwrap();
        assert!(single.states.iter().all(|x| x[0] < 0.0));
        let mut signs = [false, false];
        for k in 0..8 {
            let start = if k % 2 == 0 { -20.0 } else { 20.0 };
            let c = metropolis_chain(target, &Vector1::new(start), &Matrix1::new(0.5), 2_000, &mut rng).unwrap();
            let m = c.states.iter().map(|x| x[0]).sum::<f64>() / c.states.len() as f64;
            signs[(m > 0.0) as usize] = true;
        }
        assert!(signs[0] && signs[1]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn discretized_chain_satisfies_flow_balance() {
        // Bin a standard-normal chain and compare transition counts both ways.
        let target = |x: &Vector1<f64>| -0.5 * x[0] * x[0];
        let c = metropolis_chain(
            target,
            &Vector1::new(0.0),
            &Matrix1::new(1.0),
            400_000,
            &mut ChaCha8Rng::seed_from_u64(7),
        )
        .unwrap();
        let bin = |x: f64| ((x + 2.0) / 0.5).floor().clamp(-1.0, 8.0) as i64 + 1;
        let mut counts = [[0u64; 10]; 10];
        for pair in c.states.windows(2) {
            counts[bin(pair[0][0]) as usize][bin(pair[1][0]) as usize] += 1;
        }
        for a in 0..10 {
            for b in (a + 1)..10 {
                let (fwd, back) = (counts[a][b] as f64, counts[b][a] as f64);
                if fwd + back < 50.0 {
                    continue;
                }
                assert!((fwd - back).abs() < 4.0 * (fwd + back).sqrt(), "bins {a}<->{b}: {fwd} vs {back}");
            }
        }
    }
}
