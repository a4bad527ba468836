//! Quaternion and covariance algebra.
//!
//! Quaternions are stored as `(w, x, y, z)`. A Gaussian's covariance is
//! `R diag(exp(2 s)) Rᵀ` where `R` comes from the quaternion and `s` holds the
//! per-axis log standard deviations.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Tolerance on `|q| - 1` accepted by [`quat_to_rotation`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat(pub [f64; 4]);

impl Quat {
    pub const IDENTITY: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat([w, x, y, z])
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Quat) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn scale(&self, s: f64) -> Quat {
        Quat(self.0.map(|v| v * s))
    }
}

impl std::ops::Neg for Quat {
    type Output = Quat;
    fn neg(self) -> Quat {
        self.scale(-1.0)
    }
}

pub fn quat_normalize(q: Quat) -> Result<Quat> {
    let n = q.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateQuaternion);
    }
    Ok(q.scale(1.0 / n))
}

pub fn quat_to_rotation(q: Quat) -> Result<Matrix3<f64>> {
    let n = q.norm();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NonUnitQuaternion { norm: n });
    }
    Ok(rotation_unchecked(&q))
}

/// Rotation matrix of a quaternion assumed to be unit length.
pub(crate) fn rotation_unchecked(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = q.0;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient with respect to the rotation matrix back onto the
/// (unit) quaternion components that produced it.
pub(crate) fn rotation_grad_to_quat(q: &Quat, g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q.0;
    let dw = -z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)];
    let dx = y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
        + z * g[(2, 0)]
        + w * g[(2, 1)]
        - 2.0 * x * g[(2, 2)];
    let dy = -2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)]
        + z * g[(1, 2)]
        - w * g[(2, 0)]
        + z * g[(2, 1)]
        - 2.0 * y * g[(2, 2)];
    let dz = -2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
        - 2.0 * z * g[(1, 1)]
        + y * g[(1, 2)]
        + x * g[(2, 0)]
        + y * g[(2, 1)];
    [2.0 * dw, 2.0 * dx, 2.0 * dy, 2.0 * dz]
}

/// Gradient of `f(q / |q|)` with respect to `q`, given the gradient `g` of `f`
/// at the normalized point `q_hat`. The result is orthogonal to `q`.
pub(crate) fn normalize_backward(q_norm: f64, q_hat: &Quat, g: [f64; 4]) -> [f64; 4] {
    let radial = q_hat.0.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
    let mut out = [0.0; 4];
    for c in 0..4 {
        out[c] = (g[c] - q_hat.0[c] * radial) / q_norm;
    }
    out
}

pub fn build_covariance(q: Quat, log_scales: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let r = quat_to_rotation(q)?;
    Ok(covariance_from_rotation(&r, log_scales))
}

pub(crate) fn covariance_from_rotation(r: &Matrix3<f64>, log_scales: &Vector3<f64>) -> Matrix3<f64> {
    let d = Matrix3::from_diagonal(&log_scales.map(|s| (2.0 * s).exp()));
    let c = r * d * r.transpose();
    // exact symmetry
    (c + c.transpose()) * 0.5
}
