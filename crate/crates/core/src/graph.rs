//! Exact k-NN graph in the input space and the kernel affinities on its edges.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{Dataset, KernelSigma, RowMatrix};

const SIDECAR_MAGIC: &[u8; 4] = b"TGSG";

/// Per-point neighbor lists, stored row-major as `N x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub n_points: usize,
    pub k: usize,
    pub neighbors: Vec<u32>,
    pub distances: Vec<f64>,
    /// Empty until [`compute_weights`] runs.
    pub weights: Vec<f64>,
    /// Rows whose weights fell back to uniform (all neighbors duplicate the point).
    pub degenerate_rows: Vec<usize>,
}

impl NeighborGraph {
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[i * self.k..(i + 1) * self.k]
    }

    pub fn has_weights(&self) -> bool {
        self.weights.len() == self.n_points * self.k
    }
}

/// Exact Euclidean k nearest neighbors, ties broken by the smaller index.
pub fn build_knn(d: &Dataset, k: usize) -> Result<NeighborGraph> {
    knn_of(&d.points, k)
}

pub(crate) fn knn_of(points: &RowMatrix, k: usize) -> Result<NeighborGraph> {
    let n = points.rows();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "k must satisfy 1 <= k < N (k = {k}, N = {n})"
        )));
    }
    if n > u32::MAX as usize {
        return Err(Error::InvalidArgument("too many points for 32-bit indices".into()));
    }
    let rows: Vec<(Vec<u32>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (idx, sq) = nearest(points, i, k);
            (idx, sq.into_iter().map(f64::sqrt).collect())
        })
        .collect();
    let mut neighbors = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    for (idx, dist) in rows {
        neighbors.extend(idx);
        distances.extend(dist);
    }
    Ok(NeighborGraph {
        n_points: n,
        k,
        neighbors,
        distances,
        weights: Vec::new(),
        degenerate_rows: Vec::new(),
    })
}

/// The k closest points to `i` (excluding `i`) with squared distances, ascending.
fn nearest(points: &RowMatrix, i: usize, k: usize) -> (Vec<u32>, Vec<f64>) {
    // bounded insertion list; (sq_dist, index) is a strict total order
    let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
    let row_i = points.row(i);
    for j in 0..points.rows() {
        if j == i {
            continue;
        }
        let d = crate::types::sq_dist(row_i, points.row(j));
        if best.len() == k {
            let worst = best[k - 1];
            if d > worst.0 || (d == worst.0 && j as u32 > worst.1) {
                continue;
            }
        }
        let pos = best.partition_point(|&(bd, bj)| bd < d || (bd == d && bj < j as u32));
        best.insert(pos, (d, j as u32));
        best.truncate(k);
    }
    best.into_iter().map(|(d, j)| (j, d)).unzip()
}

/// Fills row-normalized Gaussian kernel weights over the neighbor distances.
pub fn compute_weights(mut g: NeighborGraph, mode: KernelSigma) -> Result<NeighborGraph> {
    if let KernelSigma::Fixed(s) = mode {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "fixed kernel sigma must be positive (got {s})"
            )));
        }
    }
    let k = g.k;
    let rows: Vec<(Vec<f64>, bool)> = (0..g.n_points)
        .into_par_iter()
        .map(|i| kernel_row(g.distances(i), mode))
        .collect();
    g.weights = Vec::with_capacity(g.n_points * k);
    g.degenerate_rows.clear();
    for (i, (w, degenerate)) in rows.into_iter().enumerate() {
        if degenerate {
            g.degenerate_rows.push(i);
        }
        g.weights.extend(w);
    }
    if !g.degenerate_rows.is_empty() {
        log::warn!(
            "{} point(s) have only duplicate neighbors; using uniform weights",
            g.degenerate_rows.len()
        );
    }
    Ok(g)
}

fn kernel_row(dist: &[f64], mode: KernelSigma) -> (Vec<f64>, bool) {
    let k = dist.len();
    let uniform = || (vec![1.0 / k as f64; k], true);
    let sigma = match mode {
        KernelSigma::Adaptive => dist.iter().sum::<f64>() / k as f64,
        KernelSigma::Fixed(s) => s,
    };
    if !(sigma > 0.0) {
        return uniform();
    }
    // shifting by the smallest distance leaves the normalized weights unchanged
    let d0 = dist.iter().copied().fold(f64::INFINITY, f64::min);
    let denom = 2.0 * sigma * sigma;
    let raw: Vec<f64> = dist
        .iter()
        .map(|d| (-(d * d - d0 * d0) / denom).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return uniform();
    }
    (raw.into_iter().map(|w| w / total).collect(), false)
}

/// Build the graph and its weights in one go.
pub fn build_graph(d: &Dataset, k: usize, mode: KernelSigma) -> Result<NeighborGraph> {
    compute_weights(build_knn(d, k)?, mode)
}

/// `k x n` matrix (row-major) of displacements `x_j - x_i` over the neighbors of `i`.
pub fn high_dim_edges(d: &Dataset, g: &NeighborGraph, i: usize) -> Result<Vec<f64>> {
    if i >= g.n_points || g.n_points != d.len() {
        return Err(Error::InvalidArgument(format!(
            "point index {i} out of range for {} points",
            g.n_points
        )));
    }
    Ok(edges_unchecked(&d.points, g, i))
}

pub(crate) fn edges_unchecked(points: &RowMatrix, g: &NeighborGraph, i: usize) -> Vec<f64> {
    let xi = points.row(i);
    let mut out = Vec::with_capacity(g.k * points.cols());
    for &j in g.neighbors(i) {
        out.extend(points.row(j as usize).iter().zip(xi).map(|(a, b)| a - b));
    }
    out
}

/// Binary sidecar: magic `TGSG`, then little-endian `u64 N`, `u64 k`,
/// `N*k u32` indices, `N*k f64` distances, `N*k f64` weights.
pub fn write_graph(g: &NeighborGraph, path: &Path) -> Result<()> {
    if !g.has_weights() {
        return Err(Error::InvalidArgument("graph weights are not computed".into()));
    }
    let mut buf = Vec::with_capacity(20 + g.neighbors.len() * 20);
    buf.extend_from_slice(SIDECAR_MAGIC);
    buf.extend_from_slice(&(g.n_points as u64).to_le_bytes());
    buf.extend_from_slice(&(g.k as u64).to_le_bytes());
    g.neighbors.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    g.distances.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    g.weights.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_graph(path: &Path) -> Result<NeighborGraph> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let malformed = |msg: &str| Error::Malformed {
        path: path.into(),
        msg: msg.into(),
    };
    if bytes.len() < 20 || &bytes[..4] != SIDECAR_MAGIC {
        return Err(malformed("missing TGSG header"));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
    let (n, k) = (u64_at(4), u64_at(12));
    let m = n
        .checked_mul(k)
        .ok_or_else(|| malformed("N*k overflows"))?;
    if bytes.len() != 20 + m * 20 {
        return Err(malformed("payload size does not match N and k"));
    }
    let mut off = 20;
    let mut neighbors = Vec::with_capacity(m);
    for _ in 0..m {
        let v = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if v as usize >= n {
            return Err(malformed("neighbor index out of range"));
        }
        neighbors.push(v);
        off += 4;
    }
    let mut floats = |count: usize| {
        let out: Vec<f64> = bytes[off..off + count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += count * 8;
        out
    };
    let distances = floats(m);
    let weights = floats(m);
    Ok(NeighborGraph {
        n_points: n,
        k,
        neighbors,
        distances,
        weights,
        degenerate_rows: Vec::new(),
    })
}
