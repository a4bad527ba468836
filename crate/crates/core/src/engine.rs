//! The optimization loop: initialization, the lazy target schedule, Adam
//! steps, clamping and per-epoch bookkeeping.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    build_targets, refresh_covariance_targets, should_update_targets, update_procrustes,
    TargetCache,
};
use crate::graph::{build_graph, NeighborGraph};
use crate::ingest::standardize;
use crate::losses::{total_loss, LossReport};
use crate::optim::Adam;
use crate::quat::Quat;
use crate::types::{Dataset, FitConfig, GaussianSet, Regime, RowMatrix};

#[derive(Debug, Clone, PartialEq)]
pub enum InitStrategy {
    /// Projection onto the top three principal directions.
    Pca3,
    /// `N x 3` CSV of initial positions.
    External(PathBuf),
    /// In-memory `N x 3` positions.
    Provided(RowMatrix),
}

/// One row of the training history. `loss` is evaluated before the step's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossReport,
    pub targets_updated: bool,
    #[serde(with = "hex_u64")]
    pub v_ideal_checksum: u64,
    pub max_log_scale: f64,
}

/// 64-bit checksums as fixed-width hex strings (TOML integers are signed).
mod hex_u64 {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let text = String::deserialize(d)?;
        u64::from_str_radix(&text, 16).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub gaussians: GaussianSet,
    pub history: Vec<EpochRecord>,
    pub init_means: Vec<Vector3<f64>>,
    pub config: FitConfig,
    pub graph: NeighborGraph,
    /// Final targets (empty when no epoch ran).
    pub targets: Option<TargetCache>,
    pub wall_time: f64,
}

/// Hooks and side outputs for [`fit_with`].
#[derive(Default)]
pub struct FitOptions<'a> {
    pub init: Option<InitStrategy>,
    /// Reuse a prebuilt graph (weights filled) instead of building one.
    pub graph: Option<NeighborGraph>,
    /// Called after every epoch with the updated state and current targets.
    pub observer: Option<Box<dyn FnMut(&EpochRecord, &GaussianSet, &TargetCache) + 'a>>,
    /// Write a training-state PLY every `n` epochs into the directory.
    pub checkpoint: Option<(usize, PathBuf)>,
}

/// Initial positions rescaled to unit mean row norm.
pub fn init_means(d: &Dataset, strategy: &InitStrategy) -> Result<Vec<Vector3<f64>>> {
    let raw = match strategy {
        InitStrategy::Pca3 => pca3(&d.points)?,
        InitStrategy::External(path) => load_embedding_csv(path)?,
        InitStrategy::Provided(m) => m.clone(),
    };
    if raw.rows() != d.len() || raw.cols() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "initial embedding is {}x{}, expected {}x3",
            raw.rows(),
            raw.cols(),
            d.len()
        )));
    }
    let mut means = raw.to_vec3()?;
    if means.iter().any(|m| !m.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("initial embedding".into()));
    }
    let mean_norm = means.iter().map(|m| m.norm()).sum::<f64>() / means.len() as f64;
    if !(mean_norm > 0.0) {
        return Err(Error::DegenerateData("initial embedding collapses to the origin".into()));
    }
    means.iter_mut().for_each(|m| *m /= mean_norm);
    Ok(means)
}

/// Centered projection onto the three leading principal axes. Each axis is
/// signed so its largest-magnitude loading is positive. Inputs with fewer
/// than three features are zero-padded.
pub fn pca3(points: &RowMatrix) -> Result<RowMatrix> {
    let (n, dim) = (points.rows(), points.cols());
    if n < 2 {
        return Err(Error::DegenerateData("PCA needs at least 2 points".into()));
    }
    let mut mean = vec![0.0; dim];
    for r in points.iter_rows() {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for r in points.iter_rows() {
        centered
            .iter_mut()
            .zip(r.iter().zip(&mean))
            .for_each(|(c, (v, m))| *c = v - m);
        for a in 0..dim {
            for b in a..dim {
                cov[(a, b)] += centered[a] * centered[b];
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(3)
        .map(|&c| {
            let col: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let lead = col
                .iter()
                .copied()
                .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
            if lead < 0.0 {
                col.iter().map(|v| -v).collect()
            } else {
                col
            }
        })
        .collect();

    let mut out = RowMatrix::zeros(n, 3);
    for (i, r) in points.iter_rows().enumerate() {
        let row = out.row_mut(i);
        for (a, axis) in axes.iter().enumerate() {
            row[a] = r
                .iter()
                .zip(&mean)
                .zip(axis)
                .map(|((v, m), w)| (v - m) * w)
                .sum();
        }
    }
    Ok(out)
}

/// Reads an `N x 3` numeric CSV; a non-numeric first line is taken as a header.
pub fn load_embedding_csv(path: &Path) -> Result<RowMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<[f64; 3]> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Vec<Option<f64>> = cells.iter().map(|c| c.parse().ok()).collect();
        if line_no == 0 && parsed.iter().all(Option::is_none) {
            continue;
        }
        if cells.len() != 3 {
            return Err(Error::RaggedRow {
                path: path.into(),
                row: line_no + 1,
                found: cells.len(),
                expected: 3,
            });
        }
        let mut row = [0.0; 3];
        for (c, v) in parsed.iter().enumerate() {
            row[c] = v.ok_or_else(|| Error::NonNumeric {
                path: path.into(),
                row: line_no + 1,
                column: c + 1,
                value: cells[c].to_owned(),
            })?;
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile { path: path.into() });
    }
    RowMatrix::from_rows(&rows)
}

/// Identity rotations and isotropic log-scales `s_init`; opacities unset.
pub fn init_state(means: Vec<Vector3<f64>>, cfg: &FitConfig) -> GaussianSet {
    let n = means.len();
    GaussianSet {
        means,
        log_scales: vec![Vector3::repeat(cfg.s_init); n],
        quaternions: vec![Quat::IDENTITY; n],
        opacities: None,
    }
}

/// Applies the regime ceiling and the global floor to every log-scale.
pub fn clamp_scales(state: &GaussianSet, regime: Regime) -> GaussianSet {
    let mut out = state.clone();
    clamp_in_place(&mut out, regime.scale_clamp_max(), FitConfig::default().scale_clamp_min);
    out
}

fn clamp_in_place(state: &mut GaussianSet, max: f64, min: f64) {
    for s in &mut state.log_scales {
        s.apply(|v| *v = v.clamp(min, max));
    }
}

fn renormalize_quaternions(state: &mut GaussianSet) {
    for q in &mut state.quaternions {
        let n = q.norm();
        *q = if n > 0.0 && n.is_finite() {
            q.scale(1.0 / n)
        } else {
            Quat::IDENTITY
        };
    }
}

fn scale_dataset(mut d: Dataset, factor: f64) -> Result<Dataset> {
    if factor == 1.0 {
        return Ok(d);
    }
    let data = d.points.as_slice().iter().map(|v| v * factor).collect();
    d.points = RowMatrix::new(d.points.rows(), d.points.cols(), data)?;
    if let Some(st) = d.standardization.as_mut() {
        st.scale *= factor;
    }
    Ok(d)
}

/// Runs the full optimization with PCA initialization.
pub fn fit(d: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    fit_with(d, cfg, FitOptions::default())
}

pub fn fit_with(d: &Dataset, cfg: &FitConfig, mut opts: FitOptions<'_>) -> Result<FitResult> {
    cfg.validate()?;
    d.validate()?;
    if d.len() < cfg.k + 1 {
        return Err(Error::InvalidConfig(format!(
            "k = {} needs at least {} points, dataset has {}",
            cfg.k,
            cfg.k + 1,
            d.len()
        )));
    }
    let start = Instant::now();
    let work = if cfg.standardize {
        scale_dataset(standardize(d)?, cfg.embedding_scale)?
    } else {
        d.clone()
    };
    let graph = match opts.graph.take() {
        Some(g) => {
            if g.n_points != d.len() || g.k != cfg.k || !g.has_weights() {
                return Err(Error::DimensionMismatch(
                    "supplied graph does not match the dataset and k".into(),
                ));
            }
            g
        }
        None => build_graph(&work, cfg.k, cfg.kernel_sigma)?,
    };
    let init = opts.init.clone().unwrap_or(InitStrategy::Pca3);
    let mut init_means = init_means(&work, &init)?;
    init_means.iter_mut().for_each(|m| *m *= cfg.embedding_scale);
    let mut state = init_state(init_means.clone(), cfg);

    let n = state.len();
    let mut adam_mu = Adam::new(3 * n, cfg.lr_means, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut adam_s = Adam::new(3 * n, cfg.lr_scales, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut adam_q = Adam::new(4 * n, cfg.lr_quats, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let (clamp_max, clamp_min) = (cfg.clamp_max(), cfg.scale_clamp_min);

    let mut cache: Option<TargetCache> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for step in 1..=cfg.epochs {
        let updated = match cache.as_mut() {
            None => {
                cache = Some(build_targets(
                    &state.means,
                    &work.points,
                    &graph,
                    cfg.regime,
                    cfg.procrustes_reflection_fix,
                    step,
                )?);
                true
            }
            Some(c) if should_update_targets(step, cfg) => {
                let changed = update_procrustes(
                    c,
                    &state.means,
                    &work.points,
                    &graph,
                    cfg.procrustes_reflection_fix,
                    step,
                )?;
                if changed && cfg.regime == Regime::Trajectory {
                    refresh_covariance_targets(c, cfg.regime, &state.means, &graph);
                }
                changed
            }
            Some(_) => false,
        };
        let c = cache.as_mut().expect("targets built at step 1");
        if step >= cfg.freeze_epoch {
            c.frozen = true;
        }
        if cfg.regime == Regime::Surface {
            refresh_covariance_targets(c, cfg.regime, &state.means, &graph);
        }

        let (report, grad) = total_loss(cfg, &state, c, &graph);
        if !report.l_total.is_finite() || !grad.norm().is_finite() {
            return Err(Error::NonFinite(format!(
                "step {step}: l_r={} l_c={} l_o={} grad norms=({}, {}, {})",
                report.l_r,
                report.l_c,
                report.l_o,
                report.grad_norm_r,
                report.grad_norm_c,
                report.grad_norm_o
            )));
        }

        adam_mu.step(
            state.means.iter_mut().flat_map(|v| v.iter_mut()),
            grad.means.iter().flat_map(|v| v.iter().copied()),
        );
        adam_s.step(
            state.log_scales.iter_mut().flat_map(|v| v.iter_mut()),
            grad.log_scales.iter().flat_map(|v| v.iter().copied()),
        );
        adam_q.step(
            state.quaternions.iter_mut().flat_map(|q| q.0.iter_mut()),
            grad.quaternions.iter().flat_map(|q| q.iter().copied()),
        );
        clamp_in_place(&mut state, clamp_max, clamp_min);
        renormalize_quaternions(&mut state);

        let record = EpochRecord {
            step,
            loss: report,
            targets_updated: updated,
            v_ideal_checksum: c.v_ideal_checksum(),
            max_log_scale: state.max_log_scale(),
        };
        log::debug!(
            "step {step}: total={:.6e} r={:.6e} c={:.6e} o={:.6e}",
            report.l_total,
            report.l_r,
            report.l_c,
            report.l_o
        );
        if let Some(obs) = opts.observer.as_mut() {
            obs(&record, &state, c);
        }
        if let Some((every, dir)) = &opts.checkpoint {
            if *every > 0 && step % every == 0 {
                let path = dir.join(format!("checkpoint_{step:05}.ply"));
                crate::export::write_checkpoint(&state, &work, cfg.regime, &path)?;
            }
        }
        history.push(record);
    }

    Ok(FitResult {
        gaussians: state,
        history,
        init_means,
        config: cfg.clone(),
        graph,
        targets: cache,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
