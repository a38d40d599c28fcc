//! Shared test fixtures and the naive clustering oracle.
//!
//! The oracle is a deliberate from-scratch O(N^2) rewrite of the
//! density-peaks pipeline's contract, kept independent of the library's
//! implementation so the two can be compared exactly.

#![allow(dead_code)]
// The oracle is written index-first on purpose; iterator-style rewrites
// would converge it toward the implementation under test.
#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Naive density-peaks result: everything the pipeline decides.
#[derive(Debug, PartialEq)]
pub struct NaiveClustering {
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub centers: Vec<usize>,
    pub member_of: Vec<usize>,
    pub center_distance: Vec<f64>,
}

fn naive_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

/// Full pipeline on one matrix: kNN density (self excluded, ties to the
/// lower index), separation against strictly denser tokens (density maxima
/// take the global maximum pairwise distance), top-`m` centers by
/// `rho * delta` (ties to the lower index), then nearest-center assignment
/// (ties to the lower center index, centers pinned to their own cluster).
pub fn naive_dpc(points: &[Vec<f64>], k: usize, m: usize) -> NaiveClustering {
    let n = points.len();
    assert!(k >= 1 && k < n && m >= 1 && m <= n);

    let mut sq = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            sq[i][j] = naive_sq_dist(&points[i], &points[j]);
        }
    }

    let mut rho = vec![0.0f64; n];
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| sq[i][a].total_cmp(&sq[i][b]).then(a.cmp(&b)));
        let mut sum = 0.0;
        for &j in order.iter().take(k) {
            sum += sq[i][j];
        }
        rho[i] = (-sum / k as f64).exp();
    }

    let mut max_pairwise = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq[i][j].sqrt();
            if d > max_pairwise {
                max_pairwise = d;
            }
        }
    }

    let mut delta = vec![0.0f64; n];
    for i in 0..n {
        let mut best = f64::INFINITY;
        for j in 0..n {
            if rho[j] > rho[i] {
                let d = sq[i][j].sqrt();
                if d < best {
                    best = d;
                }
            }
        }
        delta[i] = if best.is_finite() { best } else { max_pairwise };
    }

    let gamma: Vec<f64> = (0..n).map(|i| rho[i] * delta[i]).collect();
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| gamma[b].total_cmp(&gamma[a]).then(a.cmp(&b)));
    let mut centers = ranked[..m].to_vec();
    centers.sort_unstable();

    let mut member_of = vec![usize::MAX; n];
    let mut center_distance = vec![0.0f64; n];
    for (j, &c) in centers.iter().enumerate() {
        member_of[c] = j;
    }
    for i in 0..n {
        if member_of[i] != usize::MAX {
            continue;
        }
        let mut best = f64::INFINITY;
        let mut best_j = 0usize;
        for (j, &c) in centers.iter().enumerate() {
            if sq[i][c] < best {
                best = sq[i][c];
                best_j = j;
            }
        }
        member_of[i] = best_j;
        center_distance[i] = best.sqrt();
    }
    NaiveClustering {
        rho,
        delta,
        gamma,
        centers,
        member_of,
        center_distance,
    }
}

/// Default neighbour count mirrored from the library contract.
pub fn naive_default_k(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize)
        .max(3)
        .clamp(1, (n - 1).max(1))
}

/// Cluster count mirrored from the library contract.
pub fn naive_cluster_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n)
}

/// Seeded random embedding matrix.
pub fn random_points(seed: u64, n: usize, width: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..width).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect()
}
