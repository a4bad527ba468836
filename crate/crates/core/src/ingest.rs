//! Data loading and the two synthetic benchmark families.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::types::{Dataset, RowMatrix, Standardization};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnRef {
    Name(String),
    /// Zero-based position.
    Index(usize),
}

impl From<&str> for ColumnRef {
    fn from(s: &str) -> Self {
        ColumnRef::Name(s.to_owned())
    }
}

impl From<usize> for ColumnRef {
    fn from(i: usize) -> Self {
        ColumnRef::Index(i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub feature_columns: Vec<ColumnRef>,
    pub energy_column: Option<ColumnRef>,
    pub label_column: Option<ColumnRef>,
    pub delimiter: u8,
    pub has_header: bool,
}

impl CsvSchema {
    /// Headerless, comma separated, with the given feature column indices.
    pub fn indices(cols: impl IntoIterator<Item = usize>) -> Self {
        Self {
            feature_columns: cols.into_iter().map(ColumnRef::Index).collect(),
            energy_column: None,
            label_column: None,
            delimiter: b',',
            has_header: false,
        }
    }

    /// Reads the header of `path` and uses every column that is not the energy
    /// or label column as a feature.
    pub fn from_header(
        path: &Path,
        delimiter: u8,
        energy_column: Option<&str>,
        label_column: Option<&str>,
    ) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .has_headers(true)
            .flexible(true)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.is_empty() {
            return Err(Error::EmptyFile { path: path.into() });
        }
        let reserved = |h: &str| Some(h) == energy_column || Some(h) == label_column;
        Ok(Self {
            feature_columns: headers
                .iter()
                .filter(|h| !reserved(h))
                .map(ColumnRef::from)
                .collect(),
            energy_column: energy_column.map(ColumnRef::from),
            label_column: label_column.map(ColumnRef::from),
            delimiter,
            has_header: true,
        })
    }

    fn resolve(&self, path: &Path, headers: Option<&csv::StringRecord>, col: &ColumnRef) -> Result<usize> {
        match col {
            ColumnRef::Index(i) => Ok(*i),
            ColumnRef::Name(name) => headers
                .and_then(|h| h.iter().position(|c| c.trim() == name))
                .ok_or_else(|| Error::UnknownColumn {
                    path: path.into(),
                    name: name.clone(),
                }),
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Malformed {
            path: path.into(),
            msg: format!("{other:?}"),
        },
    }
}

/// Loads a dataset. Data rows and columns in error messages are 1-based.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    if schema.feature_columns.is_empty() {
        return Err(Error::InvalidArgument("schema has no feature columns".into()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(schema.has_header)
        .flexible(true)
        .from_reader(file);

    let headers = if schema.has_header {
        Some(reader.headers().map_err(|e| csv_error(path, e))?.clone())
    } else {
        None
    };
    let features = schema
        .feature_columns
        .iter()
        .map(|c| schema.resolve(path, headers.as_ref(), c))
        .collect::<Result<Vec<_>>>()?;
    let energy_col = schema
        .energy_column
        .as_ref()
        .map(|c| schema.resolve(path, headers.as_ref(), c))
        .transpose()?;
    let label_col = schema
        .label_column
        .as_ref()
        .map(|c| schema.resolve(path, headers.as_ref(), c))
        .transpose()?;
    for extra in energy_col.iter().chain(&label_col) {
        if features.contains(extra) {
            return Err(Error::InvalidArgument(format!(
                "column {} is used both as a feature and as energy/label",
                extra + 1
            )));
        }
    }

    let mut expected: Option<usize> = headers.as_ref().map(|h| h.len());
    let mut data = Vec::new();
    let mut energy = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = rows + 1;
        if record.len() == 1 && record.get(0).is_some_and(|c| c.trim().is_empty()) {
            continue;
        }
        let width = *expected.get_or_insert(record.len());
        if record.len() != width {
            return Err(Error::RaggedRow {
                path: path.into(),
                row,
                found: record.len(),
                expected: width,
            });
        }
        let cell = |col: usize| -> Result<&str> {
            record.get(col).ok_or(Error::RaggedRow {
                path: path.into(),
                row,
                found: record.len(),
                expected: col + 1,
            })
        };
        let number = |col: usize| -> Result<f64> {
            let raw = cell(col)?;
            raw.trim().parse::<f64>().map_err(|_| Error::NonNumeric {
                path: path.into(),
                row,
                column: col + 1,
                value: raw.to_owned(),
            })
        };
        for &c in &features {
            data.push(number(c)?);
        }
        if let Some(c) = energy_col {
            energy.push(number(c)?);
        }
        if let Some(c) = label_col {
            let raw = cell(c)?;
            labels.push(raw.trim().parse::<i64>().map_err(|_| Error::NonNumeric {
                path: path.into(),
                row,
                column: c + 1,
                value: raw.to_owned(),
            })?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyFile { path: path.into() });
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut d = Dataset::new(name, RowMatrix::new(rows, features.len(), data)?)?;
    if energy_col.is_some() {
        d.energy = Some(energy);
    }
    if label_col.is_some() {
        d.labels = Some(labels);
    }
    d.validate()?;
    Ok(d)
}

/// Writes points (and energy, when present) with a `x0..x{n-1}[,energy]` header.
pub fn write_csv(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = (0..d.dim()).map(|c| format!("x{c}")).collect();
    if d.energy.is_some() {
        header.push("energy".into());
    }
    if d.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..d.len() {
        let mut rec: Vec<String> = d.points.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(e) = &d.energy {
            rec.push(e[i].to_string());
        }
        if let Some(l) = &d.labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Swiss roll surface `(t cos t, h, t sin t)` with `t ~ U[1.5π, 4.5π]`, `h ~ U[0, 21]`.
///
/// Energy holds the unrolled coordinate `t` mapped to [0, 1].
pub fn generate_swiss_roll(n_points: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n_points < 10 {
        return Err(Error::InvalidArgument(format!(
            "swiss roll needs at least 10 points (got {n_points})"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise must be >= 0 (got {noise})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).expect("validated noise");
    let mut data = Vec::with_capacity(n_points * 3);
    let mut energy = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let u: f64 = rng.random();
        let t = 1.5 * PI * (1.0 + 2.0 * u);
        let h = 21.0 * rng.random::<f64>();
        let clean = [t * t.cos(), h, t * t.sin()];
        for c in clean {
            let eps = if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            data.push(c + eps);
        }
        energy.push(u);
    }
    Dataset::new(
        format!("swiss-roll(n={n_points},noise={noise},seed={seed})"),
        RowMatrix::new(n_points, 3, data)?,
    )?
    .with_energy(energy)
}

/// Helix radius and pitch (rise per turn) of the synthetic trajectory.
pub const HELIX_RADIUS: f64 = 1.0;
pub const HELIX_PITCH: f64 = 1.0;

/// A 3D helix sampled uniformly in arc length, lifted into `ambient_dim`
/// dimensions by a random column-orthonormal map, plus isotropic noise.
///
/// Consecutive indices are adjacent along the curve. Energy is `sin²(π u)`
/// with `u` the normalized arc length.
pub fn generate_trajectory(
    n_points: usize,
    ambient_dim: usize,
    turns: f64,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_points < 10 {
        return Err(Error::InvalidArgument(format!(
            "trajectory needs at least 10 points (got {n_points})"
        )));
    }
    if ambient_dim < 3 {
        return Err(Error::InvalidArgument(format!(
            "ambient dimension must be >= 3 (got {ambient_dim})"
        )));
    }
    if !(turns > 0.0 && turns.is_finite()) {
        return Err(Error::InvalidArgument(format!("turns must be positive (got {turns})")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise must be >= 0 (got {noise})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lift = random_orthonormal_columns(ambient_dim, 3, &mut rng);
    let normal = Normal::new(0.0, noise).expect("validated noise");

    let mut data = Vec::with_capacity(n_points * ambient_dim);
    let mut energy = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let u = i as f64 / (n_points - 1) as f64;
        let p = helix_point(turns, u);
        for r in 0..ambient_dim {
            let clean = (0..3).map(|c| lift[r * 3 + c] * p[c]).sum::<f64>();
            let eps = if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            data.push(clean + eps);
        }
        energy.push((PI * u).sin().powi(2));
    }
    Dataset::new(
        format!("helix(n={n_points},dim={ambient_dim},turns={turns},noise={noise},seed={seed})"),
        RowMatrix::new(n_points, ambient_dim, data)?,
    )?
    .with_energy(energy)
}

/// Point on the helix at normalized parameter `u ∈ [0, 1]` (constant speed).
pub fn helix_point(turns: f64, u: f64) -> [f64; 3] {
    let theta = 2.0 * PI * turns * u;
    [
        HELIX_RADIUS * theta.cos(),
        HELIX_RADIUS * theta.sin(),
        HELIX_PITCH * theta / (2.0 * PI),
    ]
}

/// Row-major `rows x cols` matrix with orthonormal columns (Gram-Schmidt on Gaussian draws).
fn random_orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (c, b) in basis.iter().enumerate() {
        for r in 0..rows {
            out[r * cols + c] = b[r];
        }
    }
    out
}

/// Centers every feature and rescales globally so the mean row norm is 1.
///
/// This is a similarity transform: all distance ratios are preserved.
pub fn standardize(d: &Dataset) -> Result<Dataset> {
    let (n, dim) = (d.len(), d.dim());
    if n < 2 {
        return Err(Error::DegenerateData("standardize needs at least 2 points".into()));
    }
    let mut mean = vec![0.0; dim];
    for row in d.points.iter_rows() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut centered = d.points.clone();
    for i in 0..n {
        centered
            .row_mut(i)
            .iter_mut()
            .zip(&mean)
            .for_each(|(v, m)| *v -= m);
    }
    let mean_norm = centered
        .iter_rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64;
    if !(mean_norm > 0.0) || !mean_norm.is_finite() {
        return Err(Error::DegenerateData("all points are identical".into()));
    }
    let scale = 1.0 / mean_norm;
    for i in 0..n {
        centered.row_mut(i).iter_mut().for_each(|v| *v *= scale);
    }

    // compose with any earlier standardization so the record maps raw input to output
    let transform = match &d.standardization {
        Some(prev) => Standardization {
            mean: prev
                .mean
                .iter()
                .zip(&mean)
                .map(|(pm, m)| pm + m / prev.scale)
                .collect(),
            scale: prev.scale * scale,
        },
        None => Standardization { mean, scale },
    };
    Ok(Dataset {
        name: format!("{}|standardized(scale={})", d.name, transform.scale),
        points: centered,
        energy: d.energy.clone(),
        labels: d.labels.clone(),
        standardization: Some(transform),
    })
}

/// Unit-range normalization used for energies and color coordinates.
/// Returns `None` when the input is constant.
pub fn min_max_normalize(values: &[f64]) -> Option<Vec<f64>> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return None;
    }
    Some(values.iter().map(|v| (v - lo) / span).collect())
}
