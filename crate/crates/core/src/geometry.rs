//! Procrustes rigidity targets and regime-dependent covariance targets.
//!
//! For every point `i` the spatial edges `V_i` (rows `μ_j − μ_i`) are aligned
//! with the input-space edges `E_i` (rows `x_j − x_i`) by the semi-orthogonal
//! map `P_i = U Wᵀ` from the SVD `V_iᵀ E_i = U S Wᵀ`. The singular values are
//! dropped so the target `V_ideal = E_i P_iᵀ` is a pure rotation of the local
//! input geometry. Targets are constants for the loss gradients.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{edges_unchecked, NeighborGraph};
use crate::types::{FitConfig, Regime, RowMatrix};

/// Frozen Procrustes projections and covariance targets, one block per point.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCache {
    pub k: usize,
    /// `N * k` rows; rows `i*k .. (i+1)*k` belong to point `i`.
    pub v_ideal: Vec<Vector3<f64>>,
    pub c_target: Vec<Matrix3<f64>>,
    pub frozen: bool,
    pub last_update_step: usize,
    pub update_steps: Vec<usize>,
}

impl TargetCache {
    pub fn v_ideal_of(&self, i: usize) -> &[Vector3<f64>] {
        &self.v_ideal[i * self.k..(i + 1) * self.k]
    }

    pub fn n_points(&self) -> usize {
        self.c_target.len()
    }

    /// Bit-level hash of `v_ideal`.
    pub fn v_ideal_checksum(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in &self.v_ideal {
            for x in v.iter() {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Result of one orthogonal Procrustes solve.
#[derive(Debug, Clone)]
pub struct ProcrustesSolution {
    /// `3 x n` map with orthonormal rows (when `n >= 3`).
    pub projection: DMatrix<f64>,
    pub v_ideal: Vec<Vector3<f64>>,
}

pub fn spatial_edges(means: &[Vector3<f64>], g: &NeighborGraph, i: usize) -> Vec<Vector3<f64>> {
    let mi = means[i];
    g.neighbors(i)
        .iter()
        .map(|&j| means[j as usize] - mi)
        .collect()
}

/// Orthogonal Procrustes map `P = U Wᵀ` (3 x n) from the SVD `VᵀE = U S Wᵀ`.
///
/// `P` maximizes `tr(Vᵀ E Pᵀ)` over semi-orthogonal maps; for n = 3 that is
/// the same as minimizing `‖V − E Pᵀ‖_F`.
///
/// `edges` is the `k x n` input-space edge matrix in row-major order. With
/// `reflection_fix`, square maps (n = 3) are forced to det = +1.
pub fn procrustes_target(
    spatial: &[Vector3<f64>],
    edges: &[f64],
    dim: usize,
    reflection_fix: bool,
) -> Result<ProcrustesSolution> {
    let k = spatial.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "Procrustes needs at least 2 edges (got {k})"
        )));
    }
    if dim == 0 || edges.len() != k * dim {
        return Err(Error::DimensionMismatch(format!(
            "{} edge values for {k} edges of dimension {dim}",
            edges.len()
        )));
    }
    if spatial.iter().any(|v| !v.iter().all(|x| x.is_finite()))
        || edges.iter().any(|x| !x.is_finite())
    {
        return Err(Error::NonFinite("Procrustes input".into()));
    }

    // cross-covariance Vᵀ E
    let mut cross = DMatrix::<f64>::zeros(3, dim);
    for (r, v) in spatial.iter().enumerate() {
        let e = &edges[r * dim..(r + 1) * dim];
        for a in 0..3 {
            for (c, ec) in e.iter().enumerate() {
                cross[(a, c)] += v[a] * ec;
            }
        }
    }
    let projection = semi_orthogonal_factor(&cross, reflection_fix)?;

    let v_ideal = (0..k)
        .map(|r| {
            let e = &edges[r * dim..(r + 1) * dim];
            let mut out = Vector3::zeros();
            for a in 0..3 {
                out[a] = (0..dim).map(|c| e[c] * projection[(a, c)]).sum();
            }
            out
        })
        .collect();
    Ok(ProcrustesSolution { projection, v_ideal })
}

/// Relative threshold below which a singular value is treated as zero.
const NULL_TOLERANCE: f64 = 1e-12;

/// `U Wᵀ` for the SVD `cross = U S Wᵀ`, with a deterministic completion of
/// the singular directions that carry no information.
fn semi_orthogonal_factor(cross: &DMatrix<f64>, reflection_fix: bool) -> Result<DMatrix<f64>> {
    let dim = cross.ncols();
    let rank_cap = dim.min(3);
    let svd = cross.clone().svd(true, true);
    let u = svd.u.ok_or_else(|| Error::NonFinite("SVD did not converge".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::NonFinite("SVD did not converge".into()))?;
    let sigma = svd.singular_values;

    let mut order: Vec<usize> = (0..rank_cap).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let s_max = sigma[order[0]];
    let cutoff = s_max * NULL_TOLERANCE;

    let mut left: Vec<DVector<f64>> = Vec::with_capacity(rank_cap);
    let mut right: Vec<DVector<f64>> = Vec::with_capacity(rank_cap);
    for &c in &order {
        if s_max > 0.0 && sigma[c] > cutoff {
            let mut uc: DVector<f64> = u.column(c).into_owned();
            let mut wc: DVector<f64> = v_t.row(c).transpose();
            // joint flip leaves U Wᵀ unchanged
            if first_nonzero_sign(&uc) < 0.0 {
                uc = -uc;
                wc = -wc;
            }
            left.push(uc);
            right.push(wc);
        }
    }
    while left.len() < rank_cap {
        left.push(complete_basis(&left, 3));
        right.push(complete_basis(&right, dim));
    }

    if reflection_fix && dim == 3 {
        let p = outer_sum(&left, &right, dim);
        if Matrix3::from_iterator(p.iter().copied()).determinant() < 0.0 {
            // flip the weakest direction
            left[2] = -left[2].clone();
        }
    }
    Ok(outer_sum(&left, &right, dim))
}

fn outer_sum(left: &[DVector<f64>], right: &[DVector<f64>], dim: usize) -> DMatrix<f64> {
    let mut p = DMatrix::<f64>::zeros(3, dim);
    for (u, w) in left.iter().zip(right) {
        p += u * w.transpose();
    }
    p
}

fn first_nonzero_sign(v: &DVector<f64>) -> f64 {
    v.iter()
        .find(|x| x.abs() > 1e-14)
        .map(|x| x.signum())
        .unwrap_or(1.0)
}

/// Next unit vector orthogonal to `basis`, from Gram-Schmidt over the
/// standard basis `e_0, e_1, …` (first candidate with a usable residual).
fn complete_basis(basis: &[DVector<f64>], dim: usize) -> DVector<f64> {
    let mut best: Option<(f64, DVector<f64>)> = None;
    for c in 0..dim {
        let mut v = DVector::<f64>::zeros(dim);
        v[c] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d = b.dot(&v);
                v -= b * d;
            }
        }
        let n = v.norm();
        if n > 0.5 {
            return normalize_sign(v / n);
        }
        if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
            best = Some((n, v));
        }
    }
    let (n, v) = best.expect("dim > 0");
    normalize_sign(v / n)
}

fn normalize_sign(v: DVector<f64>) -> DVector<f64> {
    if first_nonzero_sign(&v) < 0.0 {
        -v
    } else {
        v
    }
}

/// `Σ_j w_j v_j v_jᵀ` with `v_j` from the current spatial edges (surface) or
/// from the Procrustes target (trajectory).
pub fn covariance_target(
    regime: Regime,
    spatial: &[Vector3<f64>],
    v_ideal: &[Vector3<f64>],
    weights: &[f64],
) -> Matrix3<f64> {
    let rows = match regime {
        Regime::Surface => spatial,
        Regime::Trajectory => v_ideal,
    };
    weighted_scatter(rows, weights)
}

pub(crate) fn weighted_scatter(rows: &[Vector3<f64>], weights: &[f64]) -> Matrix3<f64> {
    let mut c = Matrix3::zeros();
    for (v, &w) in rows.iter().zip(weights) {
        c += (v * v.transpose()) * w;
    }
    c
}

/// Lazy schedule: refresh on multiples of the interval up to the freeze epoch.
pub fn should_update_targets(step: usize, cfg: &FitConfig) -> bool {
    step >= 1 && step % cfg.lazy_interval.max(1) == 0 && step <= cfg.freeze_epoch
}

/// Solves every point's Procrustes problem against the current means.
pub fn build_targets(
    means: &[Vector3<f64>],
    points: &RowMatrix,
    g: &NeighborGraph,
    regime: Regime,
    reflection_fix: bool,
    step: usize,
) -> Result<TargetCache> {
    let mut cache = TargetCache {
        k: g.k,
        v_ideal: Vec::new(),
        c_target: Vec::new(),
        frozen: false,
        last_update_step: step,
        update_steps: Vec::new(),
    };
    update_procrustes(&mut cache, means, points, g, reflection_fix, step)?;
    refresh_covariance_targets(&mut cache, regime, means, g);
    Ok(cache)
}

/// Recomputes `v_ideal` for all points. A frozen cache is left untouched.
pub fn update_procrustes(
    cache: &mut TargetCache,
    means: &[Vector3<f64>],
    points: &RowMatrix,
    g: &NeighborGraph,
    reflection_fix: bool,
    step: usize,
) -> Result<bool> {
    if cache.frozen {
        return Ok(false);
    }
    let dim = points.cols();
    let blocks: Vec<Vec<Vector3<f64>>> = (0..g.n_points)
        .into_par_iter()
        .map(|i| {
            let v = spatial_edges(means, g, i);
            let e = edges_unchecked(points, g, i);
            procrustes_target(&v, &e, dim, reflection_fix).map(|s| s.v_ideal)
        })
        .collect::<Result<_>>()?;
    cache.k = g.k;
    cache.v_ideal = blocks.into_iter().flatten().collect();
    cache.last_update_step = step;
    cache.update_steps.push(step);
    Ok(true)
}

pub fn refresh_covariance_targets(
    cache: &mut TargetCache,
    regime: Regime,
    means: &[Vector3<f64>],
    g: &NeighborGraph,
) {
    cache.c_target = (0..g.n_points)
        .into_par_iter()
        .map(|i| {
            let v = match regime {
                Regime::Surface => spatial_edges(means, g, i),
                Regime::Trajectory => Vec::new(),
            };
            covariance_target(regime, &v, cache.v_ideal_of(i), g.weights(i))
        })
        .collect();
}
