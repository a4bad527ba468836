//! Domain types shared by every stage of the pipeline.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quat::Quat;

/// Dense row-major matrix of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RowMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_vec3(points: &[Vector3<f64>]) -> Self {
        Self {
            rows: points.len(),
            cols: 3,
            data: points.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn sq_dist(&self, i: usize, j: usize) -> f64 {
        sq_dist(self.row(i), self.row(j))
    }

    pub fn to_vec3(&self) -> Result<Vec<Vector3<f64>>> {
        if self.cols != 3 {
            return Err(Error::DimensionMismatch(format!(
                "expected 3 columns, found {}",
                self.cols
            )));
        }
        Ok(self
            .iter_rows()
            .map(|r| Vector3::new(r[0], r[1], r[2]))
            .collect())
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Affine map applied by [`crate::ingest::standardize`]: `x' = (x - mean) * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub points: RowMatrix,
    pub energy: Option<Vec<f64>>,
    pub labels: Option<Vec<i64>>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, points: RowMatrix) -> Result<Self> {
        let d = Self {
            name: name.into(),
            points,
            energy: None,
            labels: None,
            standardization: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn with_energy(mut self, energy: Vec<f64>) -> Result<Self> {
        self.energy = Some(energy);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::DegenerateData("dataset has no feature columns".into()));
        }
        if let Some(i) = self.points.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "point {} has a non-finite coordinate",
                i / self.dim()
            )));
        }
        if let Some(e) = &self.energy {
            if e.len() != self.len() {
                return Err(Error::DimensionMismatch(format!(
                    "energy has {} entries for {} points",
                    e.len(),
                    self.len()
                )));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != self.len() {
                return Err(Error::DimensionMismatch(format!(
                    "labels have {} entries for {} points",
                    l.len(),
                    self.len()
                )));
            }
        }
        Ok(())
    }
}

/// Intrinsic dimensionality regime of the data being unrolled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    #[serde(alias = "trajectory1d")]
    Trajectory,
    #[default]
    #[serde(alias = "surface2d")]
    Surface,
}

impl Regime {
    /// Upper bound on log-scales during training.
    pub fn scale_clamp_max(self) -> f64 {
        match self {
            Regime::Surface => -0.5,
            Regime::Trajectory => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Surface => "surface",
            Regime::Trajectory => "trajectory",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "surface" | "surface2d" | "2d" => Ok(Regime::Surface),
            "trajectory" | "trajectory1d" | "1d" => Ok(Regime::Trajectory),
            other => Err(Error::InvalidArgument(format!("unknown regime {other:?}"))),
        }
    }
}

/// Bandwidth of the affinity kernel over high-dimensional neighbor distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KernelSigma {
    /// Per point: mean distance to its k neighbors.
    #[default]
    Adaptive,
    Fixed(f64),
}

/// Full set of knobs for a fit. Every field has a default; see [`FitConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub regime: Regime,
    pub k: usize,
    pub lambda_r: f64,
    pub lambda_c: f64,
    pub lambda_o: f64,
    pub epochs: usize,
    pub lazy_interval: usize,
    pub freeze_epoch: usize,
    pub huber_beta: f64,
    /// Overrides the regime's log-scale ceiling when set.
    pub scale_clamp_max: Option<f64>,
    pub scale_clamp_min: f64,
    pub s_init: f64,
    pub lr_means: f64,
    pub lr_scales: f64,
    pub lr_quats: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub kernel_sigma: KernelSigma,
    /// Divide the rigidity sum by N like the other two terms.
    pub normalize_rigidity: bool,
    /// Force det(P) = +1 on square Procrustes maps (only meaningful for n = 3).
    pub procrustes_reflection_fix: bool,
    pub standardize: bool,
    /// Working length scale: standardized data and the unit-norm initial
    /// embedding are both multiplied by this factor before fitting.
    pub embedding_scale: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Surface,
            k: 15,
            lambda_r: 10.0,
            lambda_c: 10.0,
            lambda_o: 2.0,
            epochs: 200,
            lazy_interval: 15,
            freeze_epoch: 100,
            huber_beta: 0.5,
            scale_clamp_max: None,
            scale_clamp_min: -8.0,
            s_init: -2.0,
            lr_means: 5e-3,
            lr_scales: 1e-2,
            lr_quats: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            kernel_sigma: KernelSigma::Adaptive,
            normalize_rigidity: false,
            procrustes_reflection_fix: false,
            standardize: true,
            embedding_scale: 10.0,
        }
    }
}

impl FitConfig {
    pub fn for_regime(regime: Regime) -> Self {
        Self {
            regime,
            ..Self::default()
        }
    }

    pub fn clamp_max(&self) -> f64 {
        self.scale_clamp_max
            .unwrap_or_else(|| self.regime.scale_clamp_max())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.k < 2 {
            return bad(format!("k must be at least 2 (got {})", self.k));
        }
        if self.lazy_interval < 1 {
            return bad("lazy_interval must be at least 1".into());
        }
        if self.freeze_epoch > self.epochs {
            return bad(format!(
                "freeze_epoch ({}) exceeds epochs ({})",
                self.freeze_epoch, self.epochs
            ));
        }
        for (name, v) in [
            ("lambda_r", self.lambda_r),
            ("lambda_c", self.lambda_c),
            ("lambda_o", self.lambda_o),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative (got {v})"));
            }
        }
        if !(self.huber_beta > 0.0 && self.huber_beta.is_finite()) {
            return bad(format!("huber_beta must be positive (got {})", self.huber_beta));
        }
        if self.scale_clamp_min > self.clamp_max() {
            return bad("scale_clamp_min exceeds the log-scale ceiling".into());
        }
        for (name, v) in [
            ("lr_means", self.lr_means),
            ("lr_scales", self.lr_scales),
            ("lr_quats", self.lr_quats),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative (got {v})"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.embedding_scale > 0.0 && self.embedding_scale.is_finite()) {
            return bad(format!(
                "embedding_scale must be positive (got {})",
                self.embedding_scale
            ));
        }
        if let KernelSigma::Fixed(s) = self.kernel_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("fixed kernel sigma must be positive (got {s})"));
            }
        }
        Ok(())
    }
}

/// Optimizable state: one anisotropic Gaussian per sample.
///
/// Covariances are never stored; they are rebuilt from `(quaternions, log_scales)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub means: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    /// Stored as (w, x, y, z).
    pub quaternions: Vec<Quat>,
    /// Linear opacities in [0, 1]; filled by the export stage, never optimized.
    pub opacities: Option<Vec<f64>>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn max_log_scale(&self) -> f64 {
        self.log_scales
            .iter()
            .map(|s| s.max())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn means_matrix(&self) -> RowMatrix {
        RowMatrix::from_vec3(&self.means)
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in self.means.iter().chain(&self.log_scales) {
            for x in v.iter() {
                x.to_bits().hash(&mut h);
            }
        }
        for q in &self.quaternions {
            for x in q.0 {
                x.to_bits().hash(&mut h);
            }
        }
        if let Some(o) = &self.opacities {
            for x in o {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// exp(max s - min s) per primitive.
    pub fn anisotropy_ratios(&self) -> Vec<f64> {
        self.log_scales
            .iter()
            .map(|s| (s.max() - s.min()).exp())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        FitConfig::default().validate().unwrap();
        assert_eq!(FitConfig::default().clamp_max(), -0.5);
        assert_eq!(FitConfig::for_regime(Regime::Trajectory).clamp_max(), 1.0);
    }

    #[test]
    fn config_invariants_rejected() {
        let mut c = FitConfig::default();
        c.freeze_epoch = 300;
        assert!(c.validate().is_err());
        let mut c = FitConfig::default();
        c.lazy_interval = 0;
        assert!(c.validate().is_err());
        let mut c = FitConfig::default();
        c.k = 1;
        assert!(c.validate().is_err());
        let mut c = FitConfig::default();
        c.huber_beta = 0.0;
        assert!(c.validate().is_err());
        let mut c = FitConfig::default();
        c.lambda_o = -1.0;
        assert!(c.validate().is_err());
        let mut c = FitConfig::default();
        c.kernel_sigma = KernelSigma::Fixed(0.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let mut c = FitConfig::for_regime(Regime::Trajectory);
        c.kernel_sigma = KernelSigma::Fixed(0.3);
        let text = toml::to_string(&c).unwrap();
        let back: FitConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: FitConfig = toml::from_str("regime = \"trajectory\"\nk = 10\n").unwrap();
        assert_eq!(partial.k, 10);
        assert_eq!(partial.regime, Regime::Trajectory);
        assert_eq!(partial.lambda_r, 10.0);
    }

    #[test]
    fn dataset_validation() {
        let pts = RowMatrix::from_rows(&[[0.0, 1.0], [f64::NAN, 0.0]]).unwrap();
        assert!(matches!(Dataset::new("x", pts), Err(Error::NonFinite(_))));
        let pts = RowMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let d = Dataset::new("x", pts).unwrap();
        assert!(d.with_energy(vec![1.0]).is_err());
    }

    #[test]
    fn ragged_rows_rejected() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(RowMatrix::from_rows(&rows).is_err());
    }
}
