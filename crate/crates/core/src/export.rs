//! Visualization transforms and artifact writers: splat PLY, run report and
//! training log.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::Serialize;

use crate::engine::{EpochRecord, FitResult};
use crate::error::{Error, Result};
use crate::ingest::min_max_normalize;
use crate::metrics::{evaluate, MetricsReport, StressOptions};
use crate::quat::Quat;
use crate::types::{Dataset, FitConfig, GaussianSet, Regime, RowMatrix};

pub const TRAJECTORY_ALPHA_MIN: f64 = 0.15;
pub const TRAJECTORY_ALPHA_SPAN: f64 = 0.80;
pub const TRAJECTORY_ALPHA_EXPONENT: f64 = 1.5;
pub const SURFACE_ALPHA: f64 = 0.85;
pub const SURFACE_SCALE_EXPANSION: f64 = 0.5;
/// Zeroth-order real spherical harmonic.
pub const SH_C0: f64 = 0.282_094_791_773_878_1;
const ALPHA_EPS: f64 = 1e-4;

pub const PLY_PROPERTIES: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1",
    "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
];
pub const PLY_RECORD_BYTES: usize = PLY_PROPERTIES.len() * 4;

/// One PLY vertex as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplatRecord {
    pub position: [f32; 3],
    pub normal: [f32; 3],
    pub color_dc: [f32; 3],
    pub opacity_logit: f32,
    pub log_scales: [f32; 3],
    /// `(w, x, y, z)`.
    pub quaternion: [f32; 4],
}

impl SplatRecord {
    fn to_floats(self) -> [f32; 17] {
        let mut out = [0.0f32; 17];
        out[0..3].copy_from_slice(&self.position);
        out[3..6].copy_from_slice(&self.normal);
        out[6..9].copy_from_slice(&self.color_dc);
        out[9] = self.opacity_logit;
        out[10..13].copy_from_slice(&self.log_scales);
        out[13..17].copy_from_slice(&self.quaternion);
        out
    }

    fn from_floats(f: &[f32]) -> Self {
        Self {
            position: [f[0], f[1], f[2]],
            normal: [f[3], f[4], f[5]],
            color_dc: [f[6], f[7], f[8]],
            opacity_logit: f[9],
            log_scales: [f[10], f[11], f[12]],
            quaternion: [f[13], f[14], f[15], f[16]],
        }
    }

    /// Linear opacity in `(0, 1)`.
    pub fn alpha(&self) -> f64 {
        1.0 / (1.0 + (-(self.opacity_logit as f64)).exp())
    }
}

/// Per-point opacity. Trajectories map normalized energy through a power
/// law onto `[0.15, 0.95]`; surfaces are uniformly `0.85`.
pub fn opacity_map(regime: Regime, energy: Option<&[f64]>) -> Result<Vec<f64>> {
    let energy = energy.ok_or_else(|| {
        Error::InvalidArgument("opacity mapping needs an energy column".into())
    });
    match regime {
        Regime::Surface => Ok(vec![SURFACE_ALPHA; energy?.len()]),
        Regime::Trajectory => {
            let e = energy?;
            let norm = min_max_normalize(e).unwrap_or_else(|| {
                log::warn!("energy is constant; normalized energy set to 0.5");
                vec![0.5; e.len()]
            });
            Ok(norm
                .iter()
                .map(|v| TRAJECTORY_ALPHA_MIN + TRAJECTORY_ALPHA_SPAN * v.powf(TRAJECTORY_ALPHA_EXPONENT))
                .collect())
        }
    }
}

/// Surface-regime copy with every log-scale raised by `delta`; trajectories
/// are returned unchanged.
pub fn visual_scale_expand(state: &GaussianSet, regime: Regime, delta: f64) -> GaussianSet {
    let mut out = state.clone();
    if regime == Regime::Surface {
        out.log_scales.iter_mut().for_each(|s| s.add_scalar_mut(delta));
    }
    out
}

const VIRIDIS: [[f64; 3]; 17] = [
    [0.267004, 0.004874, 0.329415],
    [0.282327, 0.094955, 0.417331],
    [0.278826, 0.175490, 0.483397],
    [0.258965, 0.251537, 0.524736],
    [0.229739, 0.322361, 0.545706],
    [0.199430, 0.387607, 0.554642],
    [0.172719, 0.448791, 0.557885],
    [0.149039, 0.508051, 0.557250],
    [0.127568, 0.566949, 0.550556],
    [0.120638, 0.625828, 0.533488],
    [0.157851, 0.683765, 0.501686],
    [0.246070, 0.738910, 0.452024],
    [0.369214, 0.788888, 0.382914],
    [0.515992, 0.831158, 0.294279],
    [0.678489, 0.863742, 0.189503],
    [0.845561, 0.887322, 0.099702],
    [0.993248, 0.906157, 0.143936],
];

/// Viridis, piecewise linear between 17 samples; `t` is clamped to `[0, 1]`.
pub fn viridis(t: f64) -> [f64; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let lo = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - lo as f64;
    let (a, b) = (VIRIDIS[lo], VIRIDIS[lo + 1]);
    [
        a[0] + f * (b[0] - a[0]),
        a[1] + f * (b[1] - a[1]),
        a[2] + f * (b[2] - a[2]),
    ]
}

/// Colors by energy when present, else by the first embedding coordinate.
pub fn default_colors(state: &GaussianSet, energy: Option<&[f64]>) -> Vec<[f64; 3]> {
    let field: Vec<f64> = match energy {
        Some(e) => e.to_vec(),
        None => state.means.iter().map(|m| m.x).collect(),
    };
    let norm = min_max_normalize(&field).unwrap_or_else(|| vec![0.5; field.len()]);
    norm.into_iter().map(viridis).collect()
}

/// Export-ready copy of a converged state: scale expansion plus opacities,
/// and the matching colors. The input is not modified.
pub fn prepare_export(
    state: &GaussianSet,
    d: &Dataset,
    regime: Regime,
) -> Result<(GaussianSet, Vec<[f64; 3]>)> {
    let mut out = visual_scale_expand(state, regime, SURFACE_SCALE_EXPANSION);
    let energy = d.energy.as_deref();
    out.opacities = Some(match (regime, energy) {
        (Regime::Surface, None) => vec![SURFACE_ALPHA; state.len()],
        _ => opacity_map(regime, energy)?,
    });
    let colors = default_colors(state, energy);
    Ok((out, colors))
}

/// Training-phase snapshot without visual transforms.
pub fn write_checkpoint(state: &GaussianSet, d: &Dataset, regime: Regime, path: &Path) -> Result<()> {
    let mut snap = state.clone();
    let energy = d.energy.as_deref();
    snap.opacities = Some(match (regime, energy) {
        (Regime::Trajectory, Some(e)) => opacity_map(regime, Some(e))?,
        _ => vec![SURFACE_ALPHA; state.len()],
    });
    write_ply(&snap, &default_colors(state, energy), path)
}

fn logit(alpha: f64) -> f64 {
    (alpha / (1.0 - alpha)).ln()
}

pub fn ply_header(n: usize) -> String {
    let mut h = format!("ply\nformat binary_little_endian 1.0\nelement vertex {n}\n");
    for p in PLY_PROPERTIES {
        h.push_str("property float ");
        h.push_str(p);
        h.push('\n');
    }
    h.push_str("end_header\n");
    h
}

/// Builds the on-disk records; opacities must be populated.
pub fn splat_records(state: &GaussianSet, colors: &[[f64; 3]]) -> Result<Vec<SplatRecord>> {
    let n = state.len();
    let alphas = state
        .opacities
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("opacities are not populated".into()))?;
    if alphas.len() != n || colors.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} splats but {} opacities and {} colors",
            alphas.len(),
            colors.len()
        )));
    }
    let mut clamped = 0usize;
    let records = (0..n)
        .map(|i| {
            let mut a = alphas[i];
            if !(a >= ALPHA_EPS && a <= 1.0 - ALPHA_EPS) {
                clamped += 1;
                a = if a.is_nan() { 0.5 } else { a.clamp(ALPHA_EPS, 1.0 - ALPHA_EPS) };
            }
            let m = &state.means[i];
            let s = &state.log_scales[i];
            let q = state.quaternions[i].0;
            let c = colors[i];
            SplatRecord {
                position: [m.x as f32, m.y as f32, m.z as f32],
                normal: [0.0; 3],
                color_dc: c.map(|v| ((v - 0.5) / SH_C0) as f32),
                opacity_logit: logit(a) as f32,
                log_scales: [s.x as f32, s.y as f32, s.z as f32],
                quaternion: q.map(|v| v as f32),
            }
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} opacities outside [{ALPHA_EPS}, {}] were clamped", 1.0 - ALPHA_EPS);
    }
    Ok(records)
}

pub fn write_ply(state: &GaussianSet, colors: &[[f64; 3]], path: &Path) -> Result<()> {
    let records = splat_records(state, colors)?;
    write_records(&records, path)
}

pub fn write_records(records: &[SplatRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = Vec::with_capacity(records.len() * PLY_RECORD_BYTES);
    for r in records {
        for f in r.to_floats() {
            body.extend_from_slice(&f.to_le_bytes());
        }
    }
    w.write_all(ply_header(records.len()).as_bytes())
        .and_then(|_| w.write_all(&body))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Parses a PLY written by [`write_ply`]; any other property layout is rejected.
pub fn read_ply(path: &Path) -> Result<Vec<SplatRecord>> {
    let malformed = |msg: &str| Error::Malformed {
        path: path.into(),
        msg: msg.to_owned(),
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut lines = Vec::new();
    loop {
        let mut line = String::new();
        let read = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if read == 0 {
            return Err(malformed("missing end_header"));
        }
        let line = line.trim_end_matches(['\n', '\r']).to_owned();
        if line == "end_header" {
            break;
        }
        lines.push(line);
    }
    if lines.first().map(String::as_str) != Some("ply") {
        return Err(malformed("not a PLY file"));
    }
    if lines.get(1).map(String::as_str) != Some("format binary_little_endian 1.0") {
        return Err(malformed("only binary little-endian PLY is supported"));
    }
    let n: usize = lines
        .get(2)
        .and_then(|l| l.strip_prefix("element vertex "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| malformed("missing vertex count"))?;
    let props: Vec<&str> = lines[3..]
        .iter()
        .filter(|l| !l.starts_with("comment"))
        .map(String::as_str)
        .collect();
    let expected: Vec<String> = PLY_PROPERTIES.iter().map(|p| format!("property float {p}")).collect();
    if props != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(malformed("unexpected vertex properties"));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != n * PLY_RECORD_BYTES {
        return Err(malformed(&format!(
            "body has {} bytes, expected {}",
            body.len(),
            n * PLY_RECORD_BYTES
        )));
    }
    Ok(body
        .chunks_exact(PLY_RECORD_BYTES)
        .map(|chunk| {
            let floats: Vec<f32> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            SplatRecord::from_floats(&floats)
        })
        .collect())
}

/// Means, log-scales, rotations and linear opacities of parsed records.
pub fn records_to_gaussians(records: &[SplatRecord]) -> GaussianSet {
    GaussianSet {
        means: records
            .iter()
            .map(|r| Vector3::from(r.position.map(f64::from)))
            .collect(),
        log_scales: records
            .iter()
            .map(|r| Vector3::from(r.log_scales.map(f64::from)))
            .collect(),
        quaternions: records
            .iter()
            .map(|r| Quat(r.quaternion.map(f64::from)))
            .collect(),
        opacities: Some(records.iter().map(SplatRecord::alpha).collect()),
    }
}

/// Embedding positions after the f32 round trip through the PLY format.
pub fn exported_means(state: &GaussianSet) -> Vec<Vector3<f64>> {
    state
        .means
        .iter()
        .map(|m| m.map(|v| f64::from(v as f32)))
        .collect()
}

/// Metrics of the initialization and of the exported (float32) embedding,
/// both against `d` exactly as given. `d` should be the data as loaded, not
/// the standardized working copy.
pub fn fit_metrics(
    d: &Dataset,
    result: &FitResult,
    optimal_scale: bool,
) -> Result<(MetricsReport, MetricsReport)> {
    let opts = StressOptions {
        optimal_scale,
        seed: result.config.seed,
    };
    let k = result.config.k;
    let init = evaluate(&d.points, &RowMatrix::from_vec3(&result.init_means), k, &opts)?;
    let fin = evaluate(
        &d.points,
        &RowMatrix::from_vec3(&exported_means(&result.gaussians)),
        k,
        &opts,
    )?;
    Ok((init, fin))
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    run: RunSummary,
    config: &'a FitConfig,
    metrics: MetricRows<'a>,
    history: HistorySummary,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    n_points: usize,
    epochs_run: usize,
    relative_stress_delta: f64,
    state_checksum: String,
}

#[derive(Debug, Serialize)]
struct MetricRows<'a> {
    init: &'a MetricsReport,
    #[serde(rename = "final")]
    fin: &'a MetricsReport,
}

#[derive(Debug, Serialize)]
struct HistorySummary {
    target_update_steps: Vec<usize>,
    max_log_scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    first: Option<EpochRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    last: Option<EpochRecord>,
}

/// `(final - init) / init` for Stress-1.
pub fn relative_stress_delta(init: &MetricsReport, fin: &MetricsReport) -> f64 {
    (fin.stress1 - init.stress1) / init.stress1
}

/// TOML run report. Contains no timing information, so identical runs
/// produce identical files.
pub fn render_report(
    result: &FitResult,
    metrics_init: &MetricsReport,
    metrics_final: &MetricsReport,
) -> Result<String> {
    if metrics_init.k != metrics_final.k {
        return Err(Error::InvalidArgument(format!(
            "metric reports use different k ({} vs {})",
            metrics_init.k, metrics_final.k
        )));
    }
    let report = Report {
        run: RunSummary {
            n_points: result.gaussians.len(),
            epochs_run: result.history.len(),
            relative_stress_delta: relative_stress_delta(metrics_init, metrics_final),
            state_checksum: format!("{:016x}", result.gaussians.checksum()),
        },
        config: &result.config,
        metrics: MetricRows {
            init: metrics_init,
            fin: metrics_final,
        },
        history: HistorySummary {
            target_update_steps: result
                .history
                .iter()
                .filter(|h| h.targets_updated)
                .map(|h| h.step)
                .collect(),
            max_log_scale: result
                .history
                .iter()
                .map(|h| h.max_log_scale)
                .fold(result.gaussians.max_log_scale(), f64::max),
            first: result.history.first().cloned(),
            last: result.history.last().cloned(),
        },
    };
    toml::to_string(&report).map_err(|e| Error::InvalidArgument(format!("report serialization: {e}")))
}

pub fn write_report(
    result: &FitResult,
    metrics_init: &MetricsReport,
    metrics_final: &MetricsReport,
    path: &Path,
) -> Result<()> {
    let text = render_report(result, metrics_init, metrics_final)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One JSON object per epoch.
pub fn write_training_log(history: &[EpochRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in history {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::InvalidArgument(format!("log serialization: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
