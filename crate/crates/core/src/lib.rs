//! Dimensionality reduction as meshless volumetric reconstruction.
//!
//! Each high-dimensional sample becomes an anisotropic 3D Gaussian (mean,
//! log-scales, unit quaternion). The Gaussians are optimized against the
//! k-NN structure of the input with three geometric terms:
//!
//! - local rigidity towards orthogonal Procrustes targets,
//! - covariance alignment towards a neighborhood footprint,
//! - orientation smoothing between neighboring quaternions.
//!
//! The converged set is exported as a standard binary splat PLY together with
//! Stress-1 / Trustworthiness / Continuity quality metrics.

pub mod ablation;
pub mod engine;
pub mod error;
pub mod export;
pub mod geometry;
pub mod graph;
pub mod ingest;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod quat;
pub mod types;

pub use error::{Error, ErrorCategory, Result};
pub use types::{Dataset, FitConfig, GaussianSet, KernelSigma, Regime, RowMatrix};
