//! Metrics, horizon-wise evaluation over the test split, scheme comparison,
//! and report emission (CSV tables plus per-variable SVG plots).

use crate::error::{Error, Result};
use crate::numerics::tensor::{self, Tensor};
use crate::telemetry::{NormalizationStats, TelemetrySeries};
use std::collections::BTreeSet;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

/// Mean absolute error.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair("mae", y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Root mean square error.
pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair("rmse", y, y_hat)?;
    let ms = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    Ok(ms.sqrt())
}

fn check_pair(op: &'static str, y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::Eval(format!("{op}: empty input")));
    }
    if y.len() != y_hat.len() {
        return Err(Error::Eval(format!("{op}: lengths differ ({} vs {})", y.len(), y_hat.len())));
    }
    Ok(())
}

/// A forecasting scheme the evaluator can drive: given a batch of normalized
/// context windows, produce `steps` normalized future rows per window.
pub trait ForecastScheme {
    fn name(&self) -> &str;
    /// Columns of the output this scheme actually predicts.
    fn variables(&self) -> Vec<usize>;
    /// contexts: [B, tau, N] -> [B, steps, N]; unpredicted columns may hold
    /// anything (they are never read).
    fn forecast_batch(&self, contexts: &Tensor, steps: usize) -> Result<Tensor>;
}

/// One (scheme, variable, horizon) cell of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsCell {
    pub variable: String,
    pub horizon: usize,
    pub mae_norm: f64,
    pub rmse_norm: f64,
    pub mae_orig: f64,
    pub rmse_orig: f64,
    pub n: usize,
}

/// Per-variable, per-horizon error table for one scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub scheme: String,
    pub cells: Vec<MetricsCell>,
    pub seed: u64,
    pub config_digest: String,
    pub test_range: (usize, usize),
}

impl MetricsReport {
    pub fn cell(&self, variable: &str, horizon: usize) -> Option<&MetricsCell> {
        self.cells.iter().find(|c| c.variable == variable && c.horizon == horizon)
    }

    pub fn horizons(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.cells.iter().map(|c| c.horizon).collect();
        set.into_iter().collect()
    }

    pub fn variable_names(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for c in &self.cells {
            if seen.insert(c.variable.clone()) {
                out.push(c.variable.clone());
            }
        }
        out
    }

    /// Mean of a metric over the given variables at one horizon.
    pub fn mean_over(&self, variables: &[&str], horizon: usize, orig_units: bool) -> Option<f64> {
        let mut sum = 0.0;
        for v in variables {
            let c = self.cell(v, horizon)?;
            sum += if orig_units { c.mae_orig } else { c.mae_norm };
        }
        Some(sum / variables.len() as f64)
    }
}

/// Everything the horizon evaluator needs about the prepared experiment.
pub struct EvalContext<'a> {
    /// Normalized, gap-free series.
    pub series: &'a TelemetrySeries,
    pub stats: &'a NormalizationStats,
    pub test_range: Range<usize>,
    pub window_len: usize,
    pub horizon: usize,
    /// Columns to report metrics for.
    pub report_columns: Vec<usize>,
    pub seed: u64,
    pub config_digest: String,
}

/// Evaluate a scheme over every eligible test window: roll `horizon` steps
/// from true history only, accumulate per-variable errors at each step.
/// Windows and their future truth rows both lie inside the test range.
pub fn evaluate_horizons(scheme: &dyn ForecastScheme, ctx: &EvalContext<'_>) -> Result<MetricsReport> {
    let (tau, l, n) = (ctx.window_len, ctx.horizon, ctx.series.cols());
    let covered = scheme.variables();
    for &c in &ctx.report_columns {
        if !covered.contains(&c) {
            return Err(Error::Eval(format!(
                "scheme `{}` does not predict column {c}",
                scheme.name()
            )));
        }
    }
    let start = ctx.test_range.start;
    let end = ctx.test_range.end;
    if end - start < tau + l {
        return Err(Error::Eval(format!(
            "test range of {} rows cannot host a window of {tau} plus {l} future rows",
            end - start
        )));
    }
    let origins: Vec<usize> = (start..=end - tau - l).collect();

    let vcount = ctx.report_columns.len();
    let mut abs_norm = vec![0.0; vcount * l];
    let mut sq_norm = vec![0.0; vcount * l];
    let mut abs_orig = vec![0.0; vcount * l];
    let mut sq_orig = vec![0.0; vcount * l];

    const CHUNK: usize = 256;
    for chunk in origins.chunks(CHUNK) {
        let b = chunk.len();
        let mut ctx_data = Vec::with_capacity(b * tau * n);
        for &o in chunk {
            for t in o..o + tau {
                ctx_data.extend_from_slice(ctx.series.row(t));
            }
        }
        let contexts = Tensor::new(vec![b, tau, n], ctx_data)?;
        let preds = scheme.forecast_batch(&contexts, l)?;
        if preds.shape() != [b, l, n] {
            return Err(Error::Eval(format!(
                "scheme `{}` returned {:?}, expected [{b}, {l}, {n}]",
                scheme.name(),
                preds.shape()
            )));
        }
        for (bi, &o) in chunk.iter().enumerate() {
            for step in 0..l {
                let truth = ctx.series.row(o + tau + step);
                for (vi, &col) in ctx.report_columns.iter().enumerate() {
                    let e = preds.at(&[bi, step, col]) - truth[col];
                    let scale = ctx.stats.scale(col);
                    let cell = vi * l + step;
                    abs_norm[cell] += e.abs();
                    sq_norm[cell] += e * e;
                    abs_orig[cell] += (e * scale).abs();
                    sq_orig[cell] += (e * scale) * (e * scale);
                }
            }
        }
    }

    let count = origins.len();
    let mut cells = Vec::with_capacity(vcount * l);
    for (vi, &col) in ctx.report_columns.iter().enumerate() {
        for step in 0..l {
            let cell = vi * l + step;
            cells.push(MetricsCell {
                variable: ctx.series.schema[col].name.clone(),
                horizon: step + 1,
                mae_norm: abs_norm[cell] / count as f64,
                rmse_norm: (sq_norm[cell] / count as f64).sqrt(),
                mae_orig: abs_orig[cell] / count as f64,
                rmse_orig: (sq_orig[cell] / count as f64).sqrt(),
                n: count,
            });
        }
    }
    Ok(MetricsReport {
        scheme: scheme.name().to_string(),
        cells,
        seed: ctx.seed,
        config_digest: ctx.config_digest.clone(),
        test_range: (start, end),
    })
}

fn fmt12(v: f64) -> String {
    format!("{v:.11e}")
}

/// Write one report in the flat CSV format.
pub fn write_report_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "scheme,variable,horizon,mae_norm,rmse_norm,mae_orig,rmse_orig,n")?;
    for c in &report.cells {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            report.scheme,
            c.variable,
            c.horizon,
            fmt12(c.mae_norm),
            fmt12(c.rmse_norm),
            fmt12(c.mae_orig),
            fmt12(c.rmse_orig),
            c.n
        )?;
    }
    Ok(())
}

/// Parse a report CSV written by [`write_report_csv`].
pub fn read_report_csv(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Eval("empty report csv".into()))?;
    if header != "scheme,variable,horizon,mae_norm,rmse_norm,mae_orig,rmse_orig,n" {
        return Err(Error::Eval(format!("unexpected report header: {header}")));
    }
    let mut scheme = String::new();
    let mut cells = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(Error::Eval(format!("report row {i}: {} fields", parts.len())));
        }
        let bad = |what: &str| Error::Eval(format!("report row {i}: bad {what}"));
        if scheme.is_empty() {
            scheme = parts[0].to_string();
        } else if scheme != parts[0] {
            return Err(Error::Eval("report csv mixes schemes".into()));
        }
        cells.push(MetricsCell {
            variable: parts[1].to_string(),
            horizon: parts[2].parse().map_err(|_| bad("horizon"))?,
            mae_norm: parts[3].parse().map_err(|_| bad("mae_norm"))?,
            rmse_norm: parts[4].parse().map_err(|_| bad("rmse_norm"))?,
            mae_orig: parts[5].parse().map_err(|_| bad("mae_orig"))?,
            rmse_orig: parts[6].parse().map_err(|_| bad("rmse_orig"))?,
            n: parts[7].parse().map_err(|_| bad("n"))?,
        });
    }
    Ok(MetricsReport { scheme, cells, seed: 0, config_digest: String::new(), test_range: (0, 0) })
}

/// Side-by-side comparison: one row per (variable, horizon, metric), one
/// column per scheme, plus the strictly-best scheme (empty on ties).
pub fn compare(reports: &[MetricsReport], out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Eval("compare: no reports".into()));
    }
    let vars = reports[0].variable_names();
    let horizons = reports[0].horizons();
    for r in reports {
        if r.variable_names() != vars || r.horizons() != horizons {
            return Err(Error::Eval(format!(
                "compare: report `{}` covers different variables/horizons than `{}`",
                r.scheme, reports[0].scheme
            )));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let table_path = out_dir.join("comparison.csv");
    let mut f = std::fs::File::create(&table_path)?;
    let scheme_names: Vec<&str> = reports.iter().map(|r| r.scheme.as_str()).collect();
    // The best-flag column only means something with competitors present.
    let flag_best = reports.len() > 1;
    if flag_best {
        writeln!(f, "variable,horizon,metric,{},best", scheme_names.join(","))?;
    } else {
        writeln!(f, "variable,horizon,metric,{}", scheme_names.join(","))?;
    }
    let metrics: [(&str, fn(&MetricsCell) -> f64); 2] =
        [("mae_norm", |c| c.mae_norm), ("rmse_norm", |c| c.rmse_norm)];
    for v in &vars {
        for &h in &horizons {
            for (metric, pick) in metrics {
                let values: Vec<f64> = reports
                    .iter()
                    .map(|r| pick(r.cell(v, h).expect("coverage checked")))
                    .collect();
                let cols: Vec<String> = values.iter().map(|&x| fmt12(x)).collect();
                if flag_best {
                    let best = strictly_best(&values).map(|i| scheme_names[i]).unwrap_or("");
                    writeln!(f, "{v},{h},{metric},{},{best}", cols.join(","))?;
                } else {
                    writeln!(f, "{v},{h},{metric},{}", cols.join(","))?;
                }
            }
        }
    }
    written.push(table_path);

    for v in &vars {
        let svg_path = out_dir.join(format!("{v}_horizon.svg"));
        let mut series = Vec::new();
        for r in reports {
            let pts: Vec<(f64, f64)> = horizons
                .iter()
                .map(|&h| (h as f64, r.cell(v, h).expect("coverage checked").mae_norm))
                .collect();
            series.push((r.scheme.clone(), pts));
        }
        std::fs::write(&svg_path, horizon_plot_svg(v, &series))?;
        written.push(svg_path);
    }
    Ok(written)
}

/// Index of the strictly smallest value, or None on a tie for best.
fn strictly_best(values: &[f64]) -> Option<usize> {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    let ties = values.iter().enumerate().any(|(i, v)| i != best && *v == values[best]);
    if ties {
        None
    } else {
        Some(best)
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Minimal hand-emitted polyline plot: horizon on x, MAE on y, one line per
/// scheme.
fn horizon_plot_svg(variable: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 40.0, 50.0);
    let xs: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).collect();
    let (x0, x1) = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let y1 = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(1e-12);
    let y0 = 0.0;
    let sx = |x: f64| ml + (x - x0) / (x1 - x0).max(1e-12) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - y0) / (y1 - y0).max(1e-12) * (h - mt - mb);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{variable}: MAE vs horizon</text>\n",
        w / 2.0
    ));
    // Axes.
    out.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        h - mb
    ));
    out.push_str(&format!("<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n", h - mb));
    // X ticks at integer horizons.
    let mut hx = x0;
    while hx <= x1 + 1e-9 {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            sx(hx),
            h - mb + 18.0,
            hx as usize
        ));
        hx += 1.0;
    }
    // Y ticks.
    for k in 0..=4 {
        let yv = y0 + (y1 - y0) * k as f64 / 4.0;
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.3e}</text>\n",
            ml - 6.0,
            sy(yv) + 4.0,
            yv
        ));
        out.push_str(&format!(
            "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#dddddd\"/>\n",
            sy(yv),
            w - mr
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">prediction horizon (steps)</text>\n",
        (ml + w - mr) / 2.0,
        h - 10.0
    ));
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        let ly = mt + 16.0 * i as f64;
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            w - mr - 130.0,
            w - mr - 110.0
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{name}</text>\n",
            w - mr - 104.0,
            ly + 4.0
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Configuration digest for report metadata: first 16 hex chars of SHA-256.
pub fn config_digest(config_text: &str) -> String {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(config_text.as_bytes());
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// The always-available floor scheme: repeat the last observed row.
pub struct Persistence {
    n: usize,
}

impl Persistence {
    pub fn new(n: usize) -> Self {
        Self { n }
    }
}

impl ForecastScheme for Persistence {
    fn name(&self) -> &str {
        "persistence"
    }

    fn variables(&self) -> Vec<usize> {
        (0..self.n).collect()
    }

    fn forecast_batch(&self, contexts: &Tensor, steps: usize) -> Result<Tensor> {
        let shape = contexts.shape();
        let (b, tau, n) = (shape[0], shape[1], shape[2]);
        let last = tensor::slice(contexts, 1, tau - 1, 1)?; // [B, 1, N]
        let mut data = Vec::with_capacity(b * steps * n);
        for bi in 0..b {
            for _ in 0..steps {
                data.extend_from_slice(&last.data()[bi * n..(bi + 1) * n]);
            }
        }
        Tensor::new(vec![b, steps, n], data)
    }
}
