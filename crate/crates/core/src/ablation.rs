//! The component ablation: the full objective against runs with the
//! covariance or orientation term disabled, all sharing seed and initialization.

use serde::{Deserialize, Serialize};

use crate::engine::{fit_with, FitOptions, FitResult, InitStrategy};
use crate::error::Result;
use crate::graph::NeighborGraph;
use crate::types::{Dataset, FitConfig, GaussianSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoCovariance,
    NoOrientation,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoCovariance, Variant::NoOrientation];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCovariance => "no-covariance",
            Variant::NoOrientation => "no-orientation",
        }
    }

    pub fn apply(self, cfg: &FitConfig) -> FitConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoCovariance => c.lambda_c = 0.0,
            Variant::NoOrientation => c.lambda_o = 0.0,
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub median_anisotropy: f64,
    pub mean_alignment: f64,
}

/// Median of `exp(max s - min s)` over points.
pub fn median_anisotropy(state: &GaussianSet) -> f64 {
    let mut r = state.anisotropy_ratios();
    if r.is_empty() {
        return f64::NAN;
    }
    r.sort_by(f64::total_cmp);
    let n = r.len();
    if n % 2 == 1 {
        r[n / 2]
    } else {
        0.5 * (r[n / 2 - 1] + r[n / 2])
    }
}

/// Mean of `(q_i . q_j)^2` over all directed graph edges.
pub fn mean_neighbor_alignment(state: &GaussianSet, g: &NeighborGraph) -> f64 {
    let mut total = 0.0;
    for i in 0..g.n_points {
        let qi = state.quaternions[i];
        for &j in g.neighbors(i) {
            total += qi.dot(&state.quaternions[j as usize]).powi(2);
        }
    }
    total / (g.n_points * g.k) as f64
}

pub fn summarize(variant: Variant, result: &FitResult) -> VariantSummary {
    VariantSummary {
        variant,
        median_anisotropy: median_anisotropy(&result.gaussians),
        mean_alignment: mean_neighbor_alignment(&result.gaussians, &result.graph),
    }
}

/// Runs all three variants on one shared graph and initialization.
pub fn run_ablation(
    d: &Dataset,
    cfg: &FitConfig,
    init: &InitStrategy,
) -> Result<Vec<(VariantSummary, FitResult)>> {
    let mut graph: Option<NeighborGraph> = None;
    let mut out = Vec::with_capacity(3);
    for v in Variant::ALL {
        let result = fit_with(
            d,
            &v.apply(cfg),
            FitOptions {
                init: Some(init.clone()),
                graph: graph.clone(),
                ..FitOptions::default()
            },
        )?;
        graph.get_or_insert_with(|| result.graph.clone());
        out.push((summarize(v, &result), result));
    }
    Ok(out)
}
