//! The three loss terms and their exact gradients.
//!
//! * rigidity: `Σ_i ‖V_i(μ) − V_ideal,i‖²_F` (surface) or the elementwise
//!   Huber sum of the same residual (trajectory); optionally divided by N.
//! * covariance: `(1/N) Σ_i ‖Σ_i − C_i‖²_F` with `Σ_i` built from `(q_i, s_i)`.
//! * orientation: `(1/N) Σ_i (1/k) Σ_j (1 − (q̂_i · q̂_j)²)`.
//!
//! Quaternions enter every term through `q̂ = q / ‖q‖`, so the quaternion
//! gradients are tangent to the unit sphere. Targets are constants.
//!
//! Per-point contributions are computed in parallel, then reduced and
//! scattered sequentially in point order so results do not depend on the
//! thread count.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TargetCache;
use crate::graph::NeighborGraph;
use crate::quat::{normalize_backward, rotation_grad_to_quat, rotation_unchecked, Quat};
use crate::types::{FitConfig, GaussianSet, Regime};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_r: f64,
    pub l_c: f64,
    pub l_o: f64,
    pub l_total: f64,
    pub grad_norm_r: f64,
    pub grad_norm_c: f64,
    pub grad_norm_o: f64,
}

/// Gradient of a scalar with respect to every parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub means: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub quaternions: Vec<[f64; 4]>,
}

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            means: vec![Vector3::zeros(); n],
            log_scales: vec![Vector3::zeros(); n],
            quaternions: vec![[0.0; 4]; n],
        }
    }

    fn add_scaled(&mut self, other: &Gradients, w: f64) {
        for (a, b) in self.means.iter_mut().zip(&other.means) {
            *a += b * w;
        }
        for (a, b) in self.log_scales.iter_mut().zip(&other.log_scales) {
            *a += b * w;
        }
        for (a, b) in self.quaternions.iter_mut().zip(&other.quaternions) {
            for c in 0..4 {
                a[c] += w * b[c];
            }
        }
    }

    pub fn norm(&self) -> f64 {
        let m: f64 = self.means.iter().map(|v| v.norm_squared()).sum();
        let s: f64 = self.log_scales.iter().map(|v| v.norm_squared()).sum();
        let q: f64 = self
            .quaternions
            .iter()
            .flat_map(|q| q.iter())
            .map(|v| v * v)
            .sum();
        (m + s + q).sqrt()
    }
}

#[inline]
fn huber_scalar(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a <= beta {
        0.5 * x * x
    } else {
        beta * (a - 0.5 * beta)
    }
}

/// Elementwise Huber sum with threshold `beta`.
pub fn huber(residuals: &[f64], beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("Huber beta must be positive (got {beta})")));
    }
    Ok(residuals.iter().map(|&x| huber_scalar(x, beta)).sum())
}

/// Rigidity loss and its gradient with respect to the means.
pub fn rigidity_loss(
    regime: Regime,
    means: &[Vector3<f64>],
    cache: &TargetCache,
    g: &NeighborGraph,
    beta: f64,
    normalize: bool,
) -> (f64, Vec<Vector3<f64>>) {
    let n = means.len();
    let per_point: Vec<(f64, Vec<Vector3<f64>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mi = means[i];
            let mut loss = 0.0;
            let mut d_res = Vec::with_capacity(g.k);
            for (&j, ideal) in g.neighbors(i).iter().zip(cache.v_ideal_of(i)) {
                let r = means[j as usize] - mi - ideal;
                match regime {
                    Regime::Surface => {
                        loss += r.norm_squared();
                        d_res.push(r * 2.0);
                    }
                    Regime::Trajectory => {
                        loss += r.iter().map(|&x| huber_scalar(x, beta)).sum::<f64>();
                        d_res.push(r.map(|x| x.clamp(-beta, beta)));
                    }
                }
            }
            (loss, d_res)
        })
        .collect();

    let scale = if normalize { 1.0 / n as f64 } else { 1.0 };
    let mut total = 0.0;
    let mut grad = vec![Vector3::zeros(); n];
    for (i, (loss, d_res)) in per_point.into_iter().enumerate() {
        total += loss;
        for (&j, d) in g.neighbors(i).iter().zip(d_res) {
            grad[j as usize] += d * scale;
            grad[i] -= d * scale;
        }
    }
    (total * scale, grad)
}

/// Unit quaternion and the norm it was divided by; zero quaternions map to identity.
fn unit(q: &Quat) -> (Quat, f64) {
    let n = q.norm();
    if n > 0.0 && n.is_finite() {
        (q.scale(1.0 / n), n)
    } else {
        (Quat::IDENTITY, 0.0)
    }
}

/// Covariance alignment loss with gradients for log-scales and quaternions.
pub fn covariance_loss(
    gaussians: &GaussianSet,
    cache: &TargetCache,
) -> (f64, Vec<Vector3<f64>>, Vec<[f64; 4]>) {
    let n = gaussians.len();
    let inv_n = 1.0 / n as f64;
    let per_point: Vec<(f64, Vector3<f64>, [f64; 4])> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (q_hat, q_norm) = unit(&gaussians.quaternions[i]);
            let r = rotation_unchecked(&q_hat);
            let var = gaussians.log_scales[i].map(|s| (2.0 * s).exp());
            let d = Matrix3::from_diagonal(&var);
            let sigma = r * d * r.transpose();
            let diff: Matrix3<f64> = sigma - cache.c_target[i];
            let loss = diff.norm_squared();

            // dL/dΣ (symmetric)
            let g_sigma = diff * (2.0 * inv_n);
            let rt_g_r = r.transpose() * g_sigma * r;
            let d_s = Vector3::from_fn(|j, _| rt_g_r[(j, j)] * 2.0 * var[j]);
            let g_rot = g_sigma * r * d * 2.0;
            let d_qhat = rotation_grad_to_quat(&q_hat, &g_rot);
            let d_q = if q_norm > 0.0 {
                normalize_backward(q_norm, &q_hat, d_qhat)
            } else {
                [0.0; 4]
            };
            (loss, d_s, d_q)
        })
        .collect();

    let mut total = 0.0;
    let mut d_s = Vec::with_capacity(n);
    let mut d_q = Vec::with_capacity(n);
    for (l, s, q) in per_point {
        total += l;
        d_s.push(s);
        d_q.push(q);
    }
    (total * inv_n, d_s, d_q)
}

/// Orientation smoothing loss and its quaternion gradient.
pub fn orientation_loss(gaussians: &GaussianSet, g: &NeighborGraph) -> (f64, Vec<[f64; 4]>) {
    let n = gaussians.len();
    let units: Vec<(Quat, f64)> = gaussians.quaternions.iter().map(unit).collect();
    let coef = 1.0 / (n as f64 * g.k as f64);

    let per_point: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let qi = &units[i].0;
            let mut loss = 0.0;
            let mut dots = Vec::with_capacity(g.k);
            for &j in g.neighbors(i) {
                let d = qi.dot(&units[j as usize].0);
                loss += 1.0 - d * d;
                dots.push(d);
            }
            (loss, dots)
        })
        .collect();

    let mut total = 0.0;
    let mut g_hat = vec![[0.0; 4]; n];
    for (i, (loss, dots)) in per_point.into_iter().enumerate() {
        total += loss;
        let qi = units[i].0;
        for (&j, d) in g.neighbors(i).iter().zip(dots) {
            let j = j as usize;
            let qj = units[j].0;
            let f = -2.0 * d * coef;
            for c in 0..4 {
                g_hat[i][c] += f * qj.0[c];
                g_hat[j][c] += f * qi.0[c];
            }
        }
    }
    let grad = g_hat
        .into_iter()
        .zip(&units)
        .map(|(gq, (q_hat, q_norm))| {
            if *q_norm > 0.0 {
                normalize_backward(*q_norm, q_hat, gq)
            } else {
                [0.0; 4]
            }
        })
        .collect();
    (total * coef, grad)
}

/// Weighted total loss, per-term report and the combined gradient.
pub fn total_loss(
    cfg: &FitConfig,
    state: &GaussianSet,
    cache: &TargetCache,
    g: &NeighborGraph,
) -> (LossReport, Gradients) {
    let n = state.len();
    let (l_r, g_mu) = rigidity_loss(
        cfg.regime,
        &state.means,
        cache,
        g,
        cfg.huber_beta,
        cfg.normalize_rigidity,
    );
    let (l_c, g_s, g_qc) = covariance_loss(state, cache);
    let (l_o, g_qo) = orientation_loss(state, g);

    let grad_r = Gradients {
        means: g_mu,
        ..Gradients::zeros(n)
    };
    let grad_c = Gradients {
        log_scales: g_s,
        quaternions: g_qc,
        ..Gradients::zeros(n)
    };
    let grad_o = Gradients {
        quaternions: g_qo,
        ..Gradients::zeros(n)
    };
    let mut grad = Gradients::zeros(n);
    grad.add_scaled(&grad_r, cfg.lambda_r);
    grad.add_scaled(&grad_c, cfg.lambda_c);
    grad.add_scaled(&grad_o, cfg.lambda_o);

    let report = LossReport {
        l_r,
        l_c,
        l_o,
        l_total: cfg.lambda_r * l_r + cfg.lambda_c * l_c + cfg.lambda_o * l_o,
        grad_norm_r: grad_r.norm(),
        grad_norm_c: grad_c.norm(),
        grad_norm_o: grad_o.norm(),
    };
    (report, grad)
}
