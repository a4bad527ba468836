//! Embedding quality: Kruskal Stress-1, Trustworthiness and Continuity.
//!
//! Neighbor ranks order points by `(squared distance, index)`, so ties are
//! resolved toward the lower index. Per-row work runs in parallel; every
//! reduction is sequential in row order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{sq_dist, RowMatrix};

/// Above this many points Stress-1 is estimated from a pair sample.
pub const EXACT_PAIR_LIMIT: usize = 5000;
pub const SAMPLED_PAIRS: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stress1: f64,
    pub trustworthiness: f64,
    pub continuity: f64,
    pub k: usize,
    pub n_pairs_used: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StressOptions {
    /// Rescale embedding distances by the least-squares factor before comparing.
    pub optimal_scale: bool,
    /// Seed for the pair sample used above [`EXACT_PAIR_LIMIT`].
    pub seed: u64,
}

impl Default for StressOptions {
    fn default() -> Self {
        Self {
            optimal_scale: true,
            seed: 0,
        }
    }
}

fn check_pair(high: &RowMatrix, low: &RowMatrix) -> Result<usize> {
    if high.rows() != low.rows() {
        return Err(Error::DimensionMismatch(format!(
            "row count mismatch: {} original vs {} embedded",
            high.rows(),
            low.rows()
        )));
    }
    let all_finite = |m: &RowMatrix| m.as_slice().iter().all(|v| v.is_finite());
    if !all_finite(high) || !all_finite(low) {
        return Err(Error::NonFinite("metric input".into()));
    }
    Ok(high.rows())
}

/// Stress-1 with the optimal uniform scale.
pub fn stress1(high: &RowMatrix, low: &RowMatrix) -> Result<f64> {
    stress1_with(high, low, &StressOptions::default()).map(|(s, _)| s)
}

/// Stress-1 and the number of pairs it was computed over.
pub fn stress1_with(high: &RowMatrix, low: &RowMatrix, opts: &StressOptions) -> Result<(f64, u64)> {
    let n = check_pair(high, low)?;
    if n < 2 {
        return Err(Error::InvalidArgument("stress needs at least 2 points".into()));
    }
    let dist = |i: usize, j: usize| {
        (
            sq_dist(low.row(i), low.row(j)).sqrt(),
            sq_dist(high.row(i), high.row(j)).sqrt(),
        )
    };

    // Pairs as (d_low, d_high); exact mode walks rows, sampled mode a fixed list.
    let pairs: Vec<Vec<(f64, f64)>> = if n <= EXACT_PAIR_LIMIT {
        (0..n)
            .into_par_iter()
            .map(|i| (i + 1..n).map(|j| dist(i, j)).collect())
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let sample: Vec<(usize, usize)> = (0..SAMPLED_PAIRS)
            .map(|_| loop {
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                if i != j {
                    break (i, j);
                }
            })
            .collect();
        sample
            .par_chunks(4096)
            .map(|chunk| chunk.iter().map(|&(i, j)| dist(i, j)).collect())
            .collect()
    };
    let n_pairs: u64 = pairs.iter().map(|p| p.len() as u64).sum();

    let (mut s_dd, mut s_dl, mut s_ll) = (0.0, 0.0, 0.0);
    for row in &pairs {
        for &(d, delta) in row {
            s_dd += d * delta;
            s_dl += d * d;
            s_ll += delta * delta;
        }
    }
    if s_ll == 0.0 {
        return Err(Error::DegenerateData("all original points coincide".into()));
    }
    let alpha = if !opts.optimal_scale {
        1.0
    } else if s_dl > 0.0 {
        s_dd / s_dl
    } else {
        0.0
    };
    let residual: Vec<f64> = pairs
        .par_iter()
        .map(|row| {
            row.iter()
                .map(|&(d, delta)| (alpha * d - delta).powi(2))
                .sum::<f64>()
        })
        .collect();
    let num: f64 = residual.iter().sum();
    Ok(((num / s_ll).sqrt(), n_pairs))
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || 2 * k >= n {
        return Err(Error::InvalidArgument(format!(
            "rank metrics need 0 < k < N/2 (k = {k}, N = {n})"
        )));
    }
    Ok(())
}

fn row_sq_dists(m: &RowMatrix, i: usize) -> Vec<f64> {
    m.iter_rows().map(|r| sq_dist(m.row(i), r)).collect()
}

#[inline]
fn closer(d: &[f64], a: usize, b: usize) -> bool {
    d[a].total_cmp(&d[b]).then(a.cmp(&b)).is_lt()
}

fn k_nearest(d: &[f64], i: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d.len()).filter(|&j| j != i).collect();
    idx.select_nth_unstable_by(k - 1, |&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Sum over points of `rank_ref(i, j) - k` for `j` among the `k` nearest in
/// `probe` but not in `reference`. Ranks start at 1.
fn rank_penalty(reference: &RowMatrix, probe: &RowMatrix, k: usize) -> u64 {
    let n = reference.rows();
    let per_row: Vec<u64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dr = row_sq_dists(reference, i);
            let dp = row_sq_dists(probe, i);
            let ref_nn = k_nearest(&dr, i, k);
            let probe_nn = k_nearest(&dp, i, k);
            probe_nn
                .iter()
                .filter(|j| ref_nn.binary_search(j).is_err())
                .map(|&j| {
                    let rank = 1 + (0..n).filter(|&l| l != i && closer(&dr, l, j)).count();
                    (rank - k) as u64
                })
                .sum()
        })
        .collect();
    per_row.iter().sum()
}

fn rank_score(n: usize, k: usize, penalty: u64) -> f64 {
    let (n, k) = (n as f64, k as f64);
    1.0 - 2.0 / (n * k * (2.0 * n - 3.0 * k - 1.0)) * penalty as f64
}

/// Penalizes embedding neighbors that are not neighbors in the original space.
pub fn trustworthiness(high: &RowMatrix, low: &RowMatrix, k: usize) -> Result<f64> {
    let n = check_pair(high, low)?;
    check_k(n, k)?;
    Ok(rank_score(n, k, rank_penalty(high, low, k)))
}

/// Penalizes original-space neighbors missing from the embedding neighborhood.
pub fn continuity(high: &RowMatrix, low: &RowMatrix, k: usize) -> Result<f64> {
    let n = check_pair(high, low)?;
    check_k(n, k)?;
    Ok(rank_score(n, k, rank_penalty(low, high, k)))
}

/// All three metrics at neighborhood size `k`.
pub fn evaluate(
    high: &RowMatrix,
    low: &RowMatrix,
    k: usize,
    opts: &StressOptions,
) -> Result<MetricsReport> {
    let (stress1, n_pairs_used) = stress1_with(high, low, opts)?;
    Ok(MetricsReport {
        stress1,
        trustworthiness: trustworthiness(high, low, k)?,
        continuity: continuity(high, low, k)?,
        k,
        n_pairs_used,
    })
}
