//! Shared fixtures for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Isotropic Gaussian blobs; returns row-stacked samples and their labels.
pub fn gaussian_blobs(
    centers: &[Vec<f64>],
    sigma: f64,
    n_per: usize,
    seed: u64,
) -> (Matrix, Vec<usize>) {
    let mut r = rng(seed);
    let mut rows = Vec::with_capacity(centers.len() * n_per);
    let mut labels = Vec::with_capacity(centers.len() * n_per);
    for (label, c) in centers.iter().enumerate() {
        for _ in 0..n_per {
            let row: Vec<f64> =
                c.iter().map(|&m| m + sigma * r.sample::<f64, _>(StandardNormal)).collect();
            rows.push(row);
            labels.push(label);
        }
    }
    (Matrix::from_rows(&rows), labels)
}

/// Mixture state fitted by hard-assigning labeled points to `k` components.
pub fn state_from_points(
    prior: crate::dpmm::DpPrior,
    assignments: &[(Vec<f64>, usize)],
    k: usize,
) -> crate::dpmm::DpmmState {
    use crate::dpmm::{posterior_from_stats, DpmmState, SuffStats};
    let dim = prior.dim();
    let mut state = DpmmState::new(prior, 1e-6);
    let mut stats = SuffStats::empty(k, dim);
    for (z, comp) in assignments {
        stats.comps[*comp].add_point(z, 1.0);
    }
    let (nw, sticks) = posterior_from_stats(&state.prior, &stats).unwrap();
    state.nw = nw;
    state.sticks = sticks;
    state.stats = stats;
    state.memory = SuffStats::empty(k, dim);
    state.ids = (0..k as u64).collect();
    state.next_id = k as u64;
    state
}

/// Fraction of points whose cluster's majority label matches their own.
pub fn cluster_purity(assignments: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(assignments.len(), labels.len());
    let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let c = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; c]; k];
    for (&a, &l) in assignments.iter().zip(labels) {
        table[a][l] += 1;
    }
    let majority: usize = table.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    majority as f64 / assignments.len() as f64
}
