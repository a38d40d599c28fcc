//! Density-peaks clustering over token embeddings (DPC-KNN).
//!
//! Local density comes from the k nearest neighbours, center candidates are
//! ranked by density times separation, and members join their nearest center.
//! All tie-breaks resolve to the lower index so results are reproducible
//! across runs and platforms.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("need at least one embedding")]
    Empty,
    #[error("embedding width mismatch at index {0}")]
    WidthMismatch(usize),
    #[error("neighbor count {k} must satisfy 1 <= k < {n}")]
    BadNeighborCount { k: usize, n: usize },
    #[error("cluster count {m} must satisfy 1 <= m <= {n}")]
    BadClusterCount { m: usize, n: usize },
    #[error("centers must be distinct, in range, and non-empty")]
    BadCenters,
    #[error("invalid assignment: {0}")]
    BadAssignment(&'static str),
    #[error("ratio must lie in (0, 1], got {0}")]
    BadRatio(f64),
}

/// Partition of `N` tokens into `M` clusters with per-token center distances.
///
/// `importance` is the negative center distance: higher means closer to the
/// cluster center, which downstream id selection uses as its rank signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    member_of: Vec<usize>,
    centers: Vec<usize>,
    center_distance: Vec<f64>,
    importance: Vec<f64>,
}

impl ClusterAssignment {
    /// Builds an assignment from raw parts, checking the partition
    /// invariants: indices in range, every cluster non-empty, and every
    /// center assigned to its own cluster at distance zero.
    pub fn from_parts(
        member_of: Vec<usize>,
        centers: Vec<usize>,
        center_distance: Vec<f64>,
    ) -> Result<Self, ClusterError> {
        let n = member_of.len();
        let m = centers.len();
        if n == 0 || m == 0 {
            return Err(ClusterError::BadAssignment("empty partition"));
        }
        if center_distance.len() != n {
            return Err(ClusterError::BadAssignment("distance length != N"));
        }
        let mut seen = vec![false; m];
        for (&token, &dist) in member_of.iter().zip(&center_distance) {
            if token >= m {
                return Err(ClusterError::BadAssignment("cluster index out of range"));
            }
            if !dist.is_finite() || dist < 0.0 {
                return Err(ClusterError::BadAssignment(
                    "negative or non-finite distance",
                ));
            }
            seen[token] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(ClusterError::BadAssignment("empty cluster"));
        }
        for (j, &c) in centers.iter().enumerate() {
            if c >= n || member_of[c] != j || center_distance[c] != 0.0 {
                return Err(ClusterError::BadAssignment(
                    "center not in its own cluster at distance zero",
                ));
            }
        }
        let importance = center_distance.iter().map(|d| -d).collect();
        Ok(Self {
            member_of,
            centers,
            center_distance,
            importance,
        })
    }

    /// Every token its own singleton cluster.
    pub fn identity(n: usize) -> Result<Self, ClusterError> {
        Self::from_parts((0..n).collect(), (0..n).collect(), vec![0.0; n])
    }

    pub fn token_count(&self) -> usize {
        self.member_of.len()
    }

    pub fn cluster_count(&self) -> usize {
        self.centers.len()
    }

    pub fn member_of(&self) -> &[usize] {
        &self.member_of
    }

    pub fn centers(&self) -> &[usize] {
        &self.centers
    }

    pub fn center_distance(&self) -> &[f64] {
        &self.center_distance
    }

    pub fn importance(&self) -> &[f64] {
        &self.importance
    }

    /// Token indices of cluster `j`, ascending.
    pub fn cluster_members(&self, j: usize) -> Vec<usize> {
        self.member_of
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == j)
            .map(|(i, _)| i)
            .collect()
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn check_widths(embeddings: &[Vec<f64>]) -> Result<(), ClusterError> {
    if embeddings.is_empty() {
        return Err(ClusterError::Empty);
    }
    let width = embeddings[0].len();
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != width {
            return Err(ClusterError::WidthMismatch(i));
        }
    }
    Ok(())
}

/// Local density from the k nearest neighbours (self excluded):
/// `rho_i = exp(-(1/k) * sum of squared distances to kNN(i))`.
///
/// Neighbour ties at equal distance resolve to the lower index.
pub fn knn_density(embeddings: &[Vec<f64>], k: usize) -> Result<Vec<f64>, ClusterError> {
    check_widths(embeddings)?;
    let n = embeddings.len();
    if k == 0 || k >= n {
        return Err(ClusterError::BadNeighborCount { k, n });
    }
    let mut rho = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (squared_distance(&embeddings[i], &embeddings[j]), j))
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let sum: f64 = dists[..k].iter().map(|(d2, _)| d2).sum();
        rho.push((-sum / k as f64).exp());
    }
    Ok(rho)
}

/// Density, separation, and their product for every token.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityProfile {
    rho: Vec<f64>,
    delta: Vec<f64>,
    gamma: Vec<f64>,
}

impl DensityProfile {
    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }
}

/// Computes the full density profile: `delta_i` is the distance to the
/// nearest strictly denser token, and tokens with no denser peer (the global
/// density maximum and any exact ties) take the maximum pairwise distance.
pub fn density_profile(embeddings: &[Vec<f64>], k: usize) -> Result<DensityProfile, ClusterError> {
    let rho = knn_density(embeddings, k)?;
    let n = embeddings.len();
    let mut max_pairwise = 0.0f64;
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = squared_distance(&embeddings[i], &embeddings[j]).sqrt();
            dist[i][j] = d;
            dist[j][i] = d;
            if d > max_pairwise {
                max_pairwise = d;
            }
        }
    }
    let mut delta = Vec::with_capacity(n);
    for i in 0..n {
        let nearest_denser = (0..n)
            .filter(|&j| rho[j] > rho[i])
            .map(|j| dist[i][j])
            .fold(f64::INFINITY, f64::min);
        delta.push(if nearest_denser.is_finite() {
            nearest_denser
        } else {
            max_pairwise
        });
    }
    let gamma = rho.iter().zip(&delta).map(|(r, d)| r * d).collect();
    Ok(DensityProfile { rho, delta, gamma })
}

/// Top-`m` tokens by `gamma = rho * delta`, ties to the lower index,
/// returned ascending.
pub fn select_centers(profile: &DensityProfile, m: usize) -> Result<Vec<usize>, ClusterError> {
    let n = profile.len();
    if m == 0 || m > n {
        return Err(ClusterError::BadClusterCount { m, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        profile.gamma[b]
            .total_cmp(&profile.gamma[a])
            .then(a.cmp(&b))
    });
    let mut centers = order[..m].to_vec();
    centers.sort_unstable();
    Ok(centers)
}

/// Joins every token to its nearest center by Euclidean distance (ties to
/// the lower center index). Center tokens always land in their own cluster,
/// so clusters are never empty even for duplicated embeddings.
pub fn assign_members(
    embeddings: &[Vec<f64>],
    centers: &[usize],
) -> Result<ClusterAssignment, ClusterError> {
    check_widths(embeddings)?;
    let n = embeddings.len();
    if centers.is_empty() {
        return Err(ClusterError::BadCenters);
    }
    let mut cluster_of_center = vec![usize::MAX; n];
    for (j, &c) in centers.iter().enumerate() {
        if c >= n || cluster_of_center[c] != usize::MAX {
            return Err(ClusterError::BadCenters);
        }
        cluster_of_center[c] = j;
    }
    let mut member_of = Vec::with_capacity(n);
    let mut center_distance = Vec::with_capacity(n);
    for i in 0..n {
        if cluster_of_center[i] != usize::MAX {
            member_of.push(cluster_of_center[i]);
            center_distance.push(0.0);
            continue;
        }
        let mut best = (f64::INFINITY, 0usize);
        for (j, &c) in centers.iter().enumerate() {
            let d2 = squared_distance(&embeddings[i], &embeddings[c]);
            if d2 < best.0 {
                best = (d2, j);
            }
        }
        member_of.push(best.1);
        center_distance.push(best.0.sqrt());
    }
    ClusterAssignment::from_parts(member_of, centers.to_vec(), center_distance)
}

/// Default neighbour count for density estimation: `max(3, ceil(sqrt(N)))`,
/// clamped so that `1 <= k < N`.
pub fn default_neighbor_count(n: usize) -> usize {
    let k = ((n as f64).sqrt().ceil() as usize).max(3);
    k.clamp(1, n.saturating_sub(1).max(1))
}

/// Cluster count from a retention ratio: `max(1, round(ratio * N))`.
pub fn cluster_count(ratio: f64, n: usize) -> Result<usize, ClusterError> {
    if !ratio.is_finite() || ratio <= 0.0 || ratio > 1.0 {
        return Err(ClusterError::BadRatio(ratio));
    }
    Ok(((ratio * n as f64).round() as usize).clamp(1, n))
}

/// Full pipeline: density, center selection at the configured ratio, and
/// nearest-center assignment.
pub fn cluster_tokens(
    embeddings: &[Vec<f64>],
    ratio: f64,
) -> Result<ClusterAssignment, ClusterError> {
    check_widths(embeddings)?;
    let n = embeddings.len();
    let m = cluster_count(ratio, n)?;
    if n == 1 {
        return ClusterAssignment::identity(1);
    }
    let profile = density_profile(embeddings, default_neighbor_count(n))?;
    let centers = select_centers(&profile, m)?;
    assign_members(embeddings, &centers)
}

/// Frame-event grouping over per-frame mean embeddings, the same machinery
/// at a coarser granularity.
pub fn temporal_cluster(
    frame_means: &[Vec<f64>],
    ratio: f64,
) -> Result<ClusterAssignment, ClusterError> {
    cluster_tokens(frame_means, ratio)
}
