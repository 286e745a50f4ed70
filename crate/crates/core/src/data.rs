//! Shared containers and on-disk formats.
//!
//! Points and responses travel as CSV (header row, feature columns first,
//! then optional `y`, `w` and `label` columns). Fits travel as JSON.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::SplineFit;

/// `N` points in `R^n` together with the declared intrinsic dimension `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    coords: Vec<f64>,
    n_points: usize,
    n_features: usize,
    intrinsic_dim: usize,
}

impl PointCloud {
    /// Builds a cloud from row-major coordinates.
    pub fn from_flat(
        coords: Vec<f64>,
        n_points: usize,
        n_features: usize,
        intrinsic_dim: usize,
    ) -> Result<Self> {
        if n_points == 0 || n_features == 0 {
            return Err(Error::InvalidArgument(
                "point cloud needs at least one point and one feature".into(),
            ));
        }
        if coords.len() != n_points * n_features {
            return Err(Error::DimensionMismatch {
                what: "point coordinates",
                expected: n_points * n_features,
                got: coords.len(),
            });
        }
        if intrinsic_dim == 0 || intrinsic_dim > n_features {
            return Err(Error::InvalidArgument(format!(
                "intrinsic dimension {intrinsic_dim} must lie in 1..={n_features}"
            )));
        }
        if let Some(pos) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "point coordinates",
                row: pos / n_features,
            });
        }
        Ok(Self {
            coords,
            n_points,
            n_features,
            intrinsic_dim,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], intrinsic_dim: usize) -> Result<Self> {
        let n_features = rows.first().map_or(0, Vec::len);
        let mut coords = Vec::with_capacity(rows.len() * n_features);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_features {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has {} values, expected {n_features}",
                    row.len()
                )));
            }
            coords.extend_from_slice(row);
        }
        Self::from_flat(coords, rows.len(), n_features, intrinsic_dim)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n_points
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n_points == 0
    }

    #[inline]
    pub fn n_features(&self) -> usize {
        self.n_features
    }

    #[inline]
    pub fn intrinsic_dim(&self) -> usize {
        self.intrinsic_dim
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.coords
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.n_features)
    }

    /// Squared Euclidean distance between point `i` and an arbitrary vector.
    #[inline]
    pub fn dist2_to(&self, i: usize, x: &[f64]) -> f64 {
        self.point(i)
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Returns the cloud with rows reordered so that new row `r` is old row `perm[r]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_points {
            return Err(Error::DimensionMismatch {
                what: "permutation",
                expected: self.n_points,
                got: perm.len(),
            });
        }
        let mut coords = Vec::with_capacity(self.coords.len());
        for &p in perm {
            coords.extend_from_slice(self.point(p));
        }
        Self::from_flat(coords, self.n_points, self.n_features, self.intrinsic_dim)
    }
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(row) => Err(Error::NonFinite { what, row }),
        None => Ok(()),
    }
}

/// Observed responses `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResponseVector(Vec<f64>);

impl ResponseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "responses")?;
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Errors unless the vector has exactly `n` entries.
    pub fn expect_len(&self, n: usize) -> Result<()> {
        if self.0.len() == n {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                what: "response length",
                expected: n,
                got: self.0.len(),
            })
        }
    }
}

impl AsRef<[f64]> for ResponseVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Nonnegative per-observation reliabilities with at least one positive entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_finite(&weights, "weights")?;
        if let Some(i) = weights.iter().position(|&w| w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight {i} is negative ({})",
                weights[i]
            )));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::InvalidArgument(
                "at least one weight must be positive".into(),
            ));
        }
        Ok(Self(weights))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Rescales so that the weights sum to their count.
    pub fn normalized(&self) -> Self {
        let n = self.0.len() as f64;
        let total: f64 = self.0.iter().sum();
        Self(self.0.iter().map(|w| w * n / total).collect())
    }
}

/// What to do with a neighborhood whose local design matrix is rank deficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegeneratePolicy {
    Fail,
    #[default]
    SkipPoint,
}

/// Knobs shared by the estimator and the solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lambda: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub solver_tolerance: f64,
    pub seed: u64,
    pub degenerate: DegeneratePolicy,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            k: 12,
            solver_tolerance: 1e-10,
            seed: 0,
            degenerate: DegeneratePolicy::SkipPoint,
        }
    }
}

impl FitConfig {
    /// Smallest neighborhood that can determine a local quadratic in `d` dimensions.
    pub fn min_neighbors(d: usize) -> usize {
        1 + d + d * (d + 1) / 2
    }

    pub fn validate(&self, intrinsic_dim: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        let min_k = Self::min_neighbors(intrinsic_dim);
        if self.k < min_k {
            return Err(Error::InvalidArgument(format!(
                "K = {} is below the minimum {min_k} for d = {intrinsic_dim}",
                self.k
            )));
        }
        if !(self.solver_tolerance > 0.0) {
            return Err(Error::InvalidArgument(
                "solver tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Json,
}

impl DataFormat {
    /// Guesses the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => DataFormat::Json,
            _ => DataFormat::Csv,
        }
    }
}

/// A loaded file: points plus whichever optional columns were present.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cloud: PointCloud,
    pub response: Option<ResponseVector>,
    pub weights: Option<WeightVector>,
    pub labels: Option<Vec<i64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonDataset {
    points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<Vec<i64>>,
}

enum Column {
    Feature,
    Response,
    Weight,
    Label,
}

fn classify_header(name: &str) -> Column {
    match name.trim().to_ascii_lowercase().as_str() {
        "y" => Column::Response,
        "w" => Column::Weight,
        "label" => Column::Label,
        _ => Column::Feature,
    }
}

/// Reads points and optional response/weight/label columns.
pub fn load_dataset(path: &Path, format: DataFormat, intrinsic_dim: usize) -> Result<Dataset> {
    match format {
        DataFormat::Csv => load_csv(path, intrinsic_dim),
        DataFormat::Json => load_json(path, intrinsic_dim),
    }
}

fn load_csv(path: &Path, intrinsic_dim: usize) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    let kinds: Vec<Column> = headers.iter().map(classify_header).collect();
    let width = kinds.len();

    let mut coords = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    let mut labels = Vec::new();
    let mut n_rows = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
        if record.len() != width {
            return Err(Error::parse(
                path,
                format!("row {row} has {} fields, header has {width}", record.len()),
            ));
        }
        for (field, kind) in record.iter().zip(&kinds) {
            let value: f64 = field.parse().map_err(|_| {
                Error::parse(
                    path,
                    format!("row {row}: cannot parse {field:?} as a number"),
                )
            })?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "input file",
                    row,
                });
            }
            match kind {
                Column::Feature => coords.push(value),
                Column::Response => y.push(value),
                Column::Weight => w.push(value),
                Column::Label => {
                    if value.fract() != 0.0 {
                        return Err(Error::parse(
                            path,
                            format!("row {row}: label {field:?} is not an integer"),
                        ));
                    }
                    labels.push(value as i64)
                }
            }
        }
        n_rows += 1;
    }
    let n_features = kinds
        .iter()
        .filter(|k| matches!(k, Column::Feature))
        .count();
    let has = |target: fn(&Column) -> bool| kinds.iter().any(target);
    let cloud = PointCloud::from_flat(coords, n_rows, n_features, intrinsic_dim)?;
    Ok(Dataset {
        cloud,
        response: if has(|k| matches!(k, Column::Response)) {
            Some(ResponseVector::new(y)?)
        } else {
            None
        },
        weights: if has(|k| matches!(k, Column::Weight)) {
            Some(WeightVector::new(w)?)
        } else {
            None
        },
        labels: has(|k| matches!(k, Column::Label)).then_some(labels),
    })
}

fn load_json(path: &Path, intrinsic_dim: usize) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let raw: JsonDataset = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let cloud = PointCloud::from_rows(&raw.points, intrinsic_dim)?;
    let n = cloud.len();
    let response = raw.y.map(ResponseVector::new).transpose()?;
    let weights = raw.w.map(WeightVector::new).transpose()?;
    if let Some(r) = &response {
        r.expect_len(n)?;
    }
    if let Some(w) = &weights {
        if w.len() != n {
            return Err(Error::DimensionMismatch {
                what: "weight length",
                expected: n,
                got: w.len(),
            });
        }
    }
    if let Some(l) = &raw.label {
        if l.len() != n {
            return Err(Error::DimensionMismatch {
                what: "label length",
                expected: n,
                got: l.len(),
            });
        }
    }
    Ok(Dataset {
        cloud,
        response,
        weights,
        labels: raw.label,
    })
}

/// Writes `header` plus rows to `path` through a temporary file and rename.
pub fn write_csv<I, R>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f64]>,
{
    atomic_write(path, |out| {
        let mut writer = csv::Writer::from_writer(out);
        writer
            .write_record(header)
            .map_err(|e| Error::parse(path, e.to_string()))?;
        for row in rows {
            let fields: Vec<String> = row.as_ref().iter().map(|v| v.to_string()).collect();
            writer
                .write_record(&fields)
                .map_err(|e| Error::parse(path, e.to_string()))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    })
}

/// Serializes any value as pretty JSON, atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, |out| {
        serde_json::to_writer_pretty(&mut *out, value)
            .map_err(|e| Error::parse(path, e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))
    })
}

/// Runs `body` against a temporary file in the target directory, then renames it over `path`.
pub fn atomic_write<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    {
        let mut out = BufWriter::new(tmp.as_file_mut());
        body(&mut out)?;
        out.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Saves a fit as JSON; fitted values round-trip bit-exactly.
pub fn save_fit(fit: &SplineFit, path: &Path) -> Result<()> {
    if fit.fitted.is_empty() {
        return Err(Error::InvalidArgument(
            "refusing to save an empty fit".into(),
        ));
    }
    write_json(path, fit)
}

pub fn load_fit(path: &Path) -> Result<SplineFit> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::parse(path, e.to_string()))
}
