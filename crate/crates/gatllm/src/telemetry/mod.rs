//! Ingestion, synthesis, repair, normalization, and windowing of multivariate
//! link telemetry.

mod csv_io;
mod interp;
mod synthetic;

pub use csv_io::{load_csv, write_csv};
pub use interp::interpolate_missing;
pub use synthetic::{generate_synthetic, SyntheticConfig};

use crate::error::{Error, Result};
use std::ops::Range;

/// Protocol layer a parameter is sampled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Layer {
    Phy,
    Mac,
    Pdcp,
}

/// One telemetry column: name, owning layer, unit, and valid range.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub layer: Layer,
    pub unit: String,
    pub min_valid: Option<f64>,
    pub max_valid: Option<f64>,
}

impl ParameterSpec {
    fn new(name: &str, layer: Layer, unit: &str, min: Option<f64>, max: Option<f64>) -> Self {
        Self { name: name.into(), layer, unit: unit.into(), min_valid: min, max_valid: max }
    }

    pub fn check(&self, value: f64, row: usize) -> Result<()> {
        if let Some(lo) = self.min_valid {
            if value < lo {
                return Err(Error::RangeViolation {
                    row,
                    column: self.name.clone(),
                    value,
                    bound: format!(">= {lo}"),
                });
            }
        }
        if let Some(hi) = self.max_valid {
            if value > hi {
                return Err(Error::RangeViolation {
                    row,
                    column: self.name.clone(),
                    value,
                    bound: format!("<= {hi}"),
                });
            }
        }
        Ok(())
    }
}

/// The nine cross-layer link parameters, in canonical column order.
pub fn canonical_schema() -> Vec<ParameterSpec> {
    use Layer::*;
    vec![
        ParameterSpec::new("DLBw", Phy, "bps", Some(0.0), None),
        ParameterSpec::new("ULSINR", Phy, "db", None, None),
        ParameterSpec::new("DLOccupyPRBNum", Phy, "number", Some(0.0), Some(100.0)),
        ParameterSpec::new("CellDLMACRate", Mac, "bit", Some(0.0), None),
        ParameterSpec::new("DLMACRate", Mac, "bit", Some(0.0), None),
        ParameterSpec::new("MCS", Mac, "index", Some(0.0), Some(28.0)),
        ParameterSpec::new("PDCPOccupyBuffer", Pdcp, "bit", Some(0.0), None),
        ParameterSpec::new("PDCPUnusedBuffer", Pdcp, "bit", Some(0.0), None),
        ParameterSpec::new("DLPDCPSDUNum", Pdcp, "number", Some(0.0), None),
    ]
}

/// Index of a named column in the canonical schema.
pub fn column_index(schema: &[ParameterSpec], name: &str) -> Option<usize> {
    schema.iter().position(|p| p.name == name)
}

/// The four variables used for headline multi-step comparisons.
pub const REPORT_VARIABLES: [&str; 4] = ["DLBw", "DLMACRate", "MCS", "ULSINR"];

/// T x N matrix of link parameters sampled once per `sample_period_ms`,
/// with a per-cell missing mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetrySeries {
    pub schema: Vec<ParameterSpec>,
    values: Vec<f64>,
    missing: Vec<bool>,
    rows: usize,
    pub sample_period_ms: u32,
}

impl TelemetrySeries {
    pub fn new(schema: Vec<ParameterSpec>, values: Vec<f64>, missing: Vec<bool>) -> Result<Self> {
        let cols = schema.len();
        if cols == 0 || values.is_empty() || values.len() % cols != 0 {
            return Err(Error::Data(format!(
                "series values ({}) must be a nonempty multiple of column count ({})",
                values.len(),
                cols
            )));
        }
        if missing.len() != values.len() {
            return Err(Error::Data("missing mask size differs from values".into()));
        }
        let rows = values.len() / cols;
        let s = Self { schema, values, missing, rows, sample_period_ms: 1 };
        s.validate()?;
        Ok(s)
    }

    /// Range-check every non-missing cell of every bounded column.
    pub fn validate(&self) -> Result<()> {
        let n = self.cols();
        for t in 0..self.rows {
            for (j, spec) in self.schema.iter().enumerate() {
                if !self.missing[t * n + j] {
                    spec.check(self.values[t * n + j], t)?;
                }
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.schema.len()
    }

    pub fn value(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.cols() + j]
    }

    pub fn is_missing(&self, t: usize, j: usize) -> bool {
        self.missing[t * self.cols() + j]
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.cols();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn set_value(&mut self, t: usize, j: usize, v: f64) {
        let n = self.cols();
        self.values[t * n + j] = v;
    }

    pub(crate) fn set_missing(&mut self, t: usize, j: usize, m: bool) {
        let n = self.cols();
        self.missing[t * n + j] = m;
    }
}

/// Sliding-window parameters: window length and stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WindowConfig {
    pub window_len: usize,
    pub stride: usize,
}

impl WindowConfig {
    pub fn new(window_len: usize, stride: usize) -> Result<Self> {
        if window_len < 2 {
            return Err(Error::Config(format!("window_len must be >= 2, got {window_len}")));
        }
        if stride < 1 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        Ok(Self { window_len, stride })
    }
}

/// Fixed-length input windows paired with the row immediately following each.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    /// Window values, each `window_len * cols` long, row-major.
    pub inputs: Vec<Vec<f64>>,
    /// Next-row targets, each `cols` long.
    pub targets: Vec<Vec<f64>>,
    pub origin_indices: Vec<usize>,
    pub window_len: usize,
    pub cols: usize,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Cut windows at origins 0, s, 2s, ... such that a next-row target exists.
pub fn make_windows(series: &TelemetrySeries, cfg: &WindowConfig) -> Result<WindowedDataset> {
    let (t_len, n) = (series.rows(), series.cols());
    let tau = cfg.window_len;
    if t_len < tau + 1 {
        return Err(Error::Data(format!(
            "series has {t_len} rows; need at least window_len + 1 = {}",
            tau + 1
        )));
    }
    let count = (t_len - tau - 1) / cfg.stride + 1;
    let mut inputs = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    let mut origins = Vec::with_capacity(count);
    for i in 0..count {
        let o = i * cfg.stride;
        let mut w = Vec::with_capacity(tau * n);
        for t in o..o + tau {
            w.extend_from_slice(series.row(t));
        }
        inputs.push(w);
        targets.push(series.row(o + tau).to_vec());
        origins.push(o);
    }
    Ok(WindowedDataset { inputs, targets, origin_indices: origins, window_len: tau, cols: n })
}

/// Per-column min/max over the training rows.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationStats {
    pub fn cols(&self) -> usize {
        self.min.len()
    }

    /// A degenerate column is constant over the fit range (min == max).
    pub fn is_degenerate(&self, j: usize) -> bool {
        self.min[j] == self.max[j]
    }

    pub fn scale(&self, j: usize) -> f64 {
        self.max[j] - self.min[j]
    }

    pub fn normalize_value(&self, j: usize, x: f64) -> f64 {
        if self.is_degenerate(j) {
            0.0
        } else {
            (x - self.min[j]) / (self.max[j] - self.min[j])
        }
    }

    pub fn denormalize_value(&self, j: usize, x: f64) -> f64 {
        x * (self.max[j] - self.min[j]) + self.min[j]
    }
}

/// Min/max over `train_rows` only; the rest of the series never contributes.
pub fn fit_normalizer(series: &TelemetrySeries, train_rows: Range<usize>) -> Result<NormalizationStats> {
    if train_rows.is_empty() || train_rows.end > series.rows() {
        return Err(Error::Data(format!(
            "train range {train_rows:?} empty or out of bounds (rows = {})",
            series.rows()
        )));
    }
    let n = series.cols();
    let mut min = vec![f64::INFINITY; n];
    let mut max = vec![f64::NEG_INFINITY; n];
    for t in train_rows {
        for j in 0..n {
            if series.is_missing(t, j) {
                return Err(Error::Data(format!(
                    "missing cell at row {t}, column `{}`: interpolate before fitting the normalizer",
                    series.schema[j].name
                )));
            }
            let v = series.value(t, j);
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    Ok(NormalizationStats { min, max })
}

/// Linear map of each column onto [0, 1]; degenerate columns map to 0.
pub fn normalize(series: &TelemetrySeries, stats: &NormalizationStats) -> Result<TelemetrySeries> {
    if stats.cols() != series.cols() {
        return Err(Error::Shape {
            op: "normalize",
            detail: format!("stats cover {} columns, series has {}", stats.cols(), series.cols()),
        });
    }
    let mut out = series.clone();
    let n = series.cols();
    for t in 0..series.rows() {
        for j in 0..n {
            out.set_value(t, j, stats.normalize_value(j, series.value(t, j)));
        }
    }
    // Normalized values live on [0,1]-ish scale; drop the physical bounds.
    for spec in &mut out.schema {
        spec.min_valid = None;
        spec.max_valid = None;
    }
    Ok(out)
}

/// Exact inverse of [`normalize`] on non-degenerate columns.
pub fn denormalize(series: &TelemetrySeries, stats: &NormalizationStats) -> Result<TelemetrySeries> {
    if stats.cols() != series.cols() {
        return Err(Error::Shape {
            op: "denormalize",
            detail: format!("stats cover {} columns, series has {}", stats.cols(), series.cols()),
        });
    }
    let mut out = series.clone();
    let n = series.cols();
    for t in 0..series.rows() {
        for j in 0..n {
            out.set_value(t, j, stats.denormalize_value(j, series.value(t, j)));
        }
    }
    Ok(out)
}

/// Contiguous train/validation/test ranges in temporal order.
pub fn chronological_split(count: usize, fractions: (f64, f64, f64)) -> Result<[Range<usize>; 3]> {
    let (a, b, c) = fractions;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(Error::Config(format!("split fractions must be positive, got {fractions:?}")));
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must sum to 1, got {}", a + b + c)));
    }
    let n1 = (count as f64 * a).floor() as usize;
    let n2 = (count as f64 * b).floor() as usize;
    let ranges = [0..n1, n1..n1 + n2, n1 + n2..count];
    if ranges.iter().any(|r| r.is_empty()) {
        return Err(Error::Config(format!(
            "split of {count} rows by {fractions:?} leaves an empty partition"
        )));
    }
    Ok(ranges)
}
