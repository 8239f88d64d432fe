//! Comparison schemes: vector autoregression with differencing, the
//! univariate model variant, the no-graph-attention ablation, and the
//! persistence floor.

use crate::error::{Error, Result};
use crate::eval::{self, EvalContext, ForecastScheme, MetricsReport, Persistence};
use crate::forecaster::{train, Forecaster, ForecasterConfig, TrainConfig};
use crate::numerics::tensor::{self, Tensor};
use crate::telemetry::{make_windows, TelemetrySeries, WindowConfig, WindowedDataset};
use std::ops::Range;

/// VAR(p) with d-th order differencing, least-squares estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct VarModel {
    pub order_p: usize,
    pub differencing_d: usize,
    /// A_1 .. A_p, each [N, N]: row r of A_i holds the weights of lag-i
    /// values in the equation for variable r.
    pub coefficients: Vec<Tensor>,
    pub intercept: Vec<f64>,
    /// Set when the normal equations were singular and the 1e-8 ridge
    /// fallback produced the estimate.
    pub ridge_fallback: bool,
}

const RIDGE_LAMBDA: f64 = 1e-8;

/// Apply d rounds of first differencing to a row-major [T, N] series.
fn difference(data: &[f64], rows: usize, cols: usize, d: usize) -> (Vec<f64>, usize) {
    let mut cur = data.to_vec();
    let mut t = rows;
    for _ in 0..d {
        let mut next = Vec::with_capacity((t - 1) * cols);
        for r in 1..t {
            for c in 0..cols {
                next.push(cur[r * cols + c] - cur[(r - 1) * cols + c]);
            }
        }
        cur = next;
        t -= 1;
    }
    (cur, t)
}

/// Gaussian elimination with partial pivoting on [A | B]; A is k x k, B is
/// k x m, both row-major. Returns None when a pivot vanishes.
fn solve_linear(a: &mut [f64], b: &mut [f64], k: usize, m: usize) -> Option<()> {
    for col in 0..k {
        let mut pivot = col;
        for r in col + 1..k {
            if a[r * k + col].abs() > a[pivot * k + col].abs() {
                pivot = r;
            }
        }
        if a[pivot * k + col].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for c in 0..k {
                a.swap(col * k + c, pivot * k + c);
            }
            for c in 0..m {
                b.swap(col * m + c, pivot * m + c);
            }
        }
        let inv = 1.0 / a[col * k + col];
        for r in 0..k {
            if r == col {
                continue;
            }
            let factor = a[r * k + col] * inv;
            if factor == 0.0 {
                continue;
            }
            for c in col..k {
                a[r * k + c] -= factor * a[col * k + c];
            }
            for c in 0..m {
                b[r * m + c] -= factor * b[col * m + c];
            }
        }
    }
    for r in 0..k {
        let inv = 1.0 / a[r * k + r];
        for c in 0..m {
            b[r * m + c] *= inv;
        }
    }
    Some(())
}

/// Estimate intercept and A_1..A_p by ordinary least squares over stacked
/// lagged regressors of the (differenced) series.
pub fn fit_var(series: &Tensor, p: usize, d: usize) -> Result<VarModel> {
    if series.rank() != 2 {
        return Err(Error::Shape { op: "fit_var", detail: format!("series {:?}", series.shape()) });
    }
    let (rows, n) = (series.shape()[0], series.shape()[1]);
    if rows <= d || rows - d <= n * p + 1 {
        return Err(Error::Data(format!(
            "fit_var: {rows} rows with d={d} leaves too few observations for N={n}, p={p}"
        )));
    }
    let (work, t) = difference(series.data(), rows, n, d);
    let k = 1 + n * p; // intercept + p lag blocks
    let obs = t - p;

    // Normal equations: (X^T X) beta = X^T Y with X rows
    // [1, y_{t-1}, ..., y_{t-p}].
    let mut xtx = vec![0.0; k * k];
    let mut xty = vec![0.0; k * n];
    let mut xrow = vec![0.0; k];
    for t_i in p..t {
        xrow[0] = 1.0;
        for lag in 1..=p {
            let src = (t_i - lag) * n;
            xrow[1 + (lag - 1) * n..1 + lag * n].copy_from_slice(&work[src..src + n]);
        }
        let y = &work[t_i * n..(t_i + 1) * n];
        for r in 0..k {
            let xr = xrow[r];
            if xr == 0.0 {
                continue;
            }
            for c in r..k {
                xtx[r * k + c] += xr * xrow[c];
            }
            for c in 0..n {
                xty[r * n + c] += xr * y[c];
            }
        }
    }
    for r in 0..k {
        for c in 0..r {
            xtx[r * k + c] = xtx[c * k + r];
        }
    }

    let mut ridge_fallback = false;
    let mut a = xtx.clone();
    let mut beta = xty.clone();
    if solve_linear(&mut a, &mut beta, k, n).is_none() {
        ridge_fallback = true;
        a = xtx;
        for i in 0..k {
            a[i * k + i] += RIDGE_LAMBDA;
        }
        beta = xty;
        solve_linear(&mut a, &mut beta, k, n).ok_or_else(|| {
            Error::Data("fit_var: normal equations singular even with ridge".into())
        })?;
    }
    let _ = obs;

    // beta is [k, N]: row 0 intercept, then p blocks of N rows.
    let intercept: Vec<f64> = (0..n).map(|c| beta[c]).collect();
    let mut coefficients = Vec::with_capacity(p);
    for lag in 0..p {
        let mut m = Tensor::zeros(&[n, n]);
        for r in 0..n {
            for c in 0..n {
                // Equation for variable r, regressor = lagged variable c.
                m.data_mut()[r * n + c] = beta[(1 + lag * n + c) * n + r];
            }
        }
        coefficients.push(m);
    }
    Ok(VarModel { order_p: p, differencing_d: d, coefficients, intercept, ridge_fallback })
}

/// Iterate the fitted recursion `steps` ahead on differenced values, then
/// reintegrate to the original scale. `history` is [rows, N] with
/// rows >= p + d.
pub fn var_forecast(model: &VarModel, history: &Tensor, steps: usize) -> Result<Tensor> {
    if history.rank() != 2 {
        return Err(Error::Shape { op: "var_forecast", detail: format!("history {:?}", history.shape()) });
    }
    let (rows, n) = (history.shape()[0], history.shape()[1]);
    let (p, d) = (model.order_p, model.differencing_d);
    if rows < p + d {
        return Err(Error::Data(format!(
            "var_forecast: history of {rows} rows < p + d = {}",
            p + d
        )));
    }
    if !model.intercept.is_empty() && model.intercept.len() != n {
        return Err(Error::Shape {
            op: "var_forecast",
            detail: format!("model is {}-variate, history has {n} columns", model.intercept.len()),
        });
    }

    // Last levels of each differencing stage, for reintegration.
    let mut stage_last: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
    let mut cur = history.data().to_vec();
    let mut t = rows;
    stage_last.push(cur[(t - 1) * n..t * n].to_vec());
    for _ in 0..d {
        let (next, nt) = difference(&cur, t, n, 1);
        cur = next;
        t = nt;
        stage_last.push(cur[(t - 1) * n..t * n].to_vec());
    }

    // Recursion state: last p differenced rows, newest last.
    let mut lags: Vec<Vec<f64>> = (t.saturating_sub(p)..t).map(|r| cur[r * n..(r + 1) * n].to_vec()).collect();
    let mut out = Vec::with_capacity(steps * n);
    for _ in 0..steps {
        let mut next = model.intercept.clone();
        if next.is_empty() {
            next = vec![0.0; n];
        }
        for (lag, coef) in model.coefficients.iter().enumerate() {
            let prev = &lags[lags.len() - 1 - lag];
            for r in 0..n {
                let row = &coef.data()[r * n..(r + 1) * n];
                for c in 0..n {
                    next[r] += row[c] * prev[c];
                }
            }
        }
        // Reintegrate through the stored stage levels.
        let mut level = next.clone();
        for stage in (0..d).rev() {
            for c in 0..n {
                level[c] += stage_last[stage][c];
            }
            stage_last[stage].clone_from(&level);
        }
        out.extend_from_slice(&level);
        if p > 0 {
            lags.remove(0);
            lags.push(next);
        }
    }
    Tensor::new(vec![steps, n], out)
}

/// The comparison schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Varima,
    #[serde(rename = "univariate")]
    UnivariateGatLlm,
    #[serde(rename = "nogat")]
    NoGatDecoder,
    Persistence,
}

impl BaselineKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "varima" => Ok(Self::Varima),
            "univariate" => Ok(Self::UnivariateGatLlm),
            "nogat" => Ok(Self::NoGatDecoder),
            "persistence" => Ok(Self::Persistence),
            other => Err(Error::Config(format!(
                "unknown scheme `{other}` (expected varima|univariate|nogat|persistence)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Varima => "varima",
            Self::UnivariateGatLlm => "univariate",
            Self::NoGatDecoder => "nogat",
            Self::Persistence => "persistence",
        }
    }
}

/// VAR scheme over normalized windows.
pub struct VarScheme {
    model: VarModel,
    n: usize,
}

impl VarScheme {
    pub fn new(model: VarModel, n: usize) -> Self {
        Self { model, n }
    }
}

impl ForecastScheme for VarScheme {
    fn name(&self) -> &str {
        "varima"
    }

    fn variables(&self) -> Vec<usize> {
        (0..self.n).collect()
    }

    fn forecast_batch(&self, contexts: &Tensor, steps: usize) -> Result<Tensor> {
        let shape = contexts.shape();
        let (b, tau, n) = (shape[0], shape[1], shape[2]);
        let mut out = Vec::with_capacity(b * steps * n);
        for bi in 0..b {
            let hist = Tensor::new(
                vec![tau, n],
                contexts.data()[bi * tau * n..(bi + 1) * tau * n].to_vec(),
            )?;
            let fc = var_forecast(&self.model, &hist, steps)?;
            out.extend_from_slice(fc.data());
        }
        Tensor::new(vec![b, steps, n], out)
    }
}

/// The trained multivariate model (or its no-GAT ablation) as a scheme.
pub struct ModelScheme<'a> {
    name: String,
    model: &'a Forecaster,
}

impl<'a> ModelScheme<'a> {
    pub fn new(name: impl Into<String>, model: &'a Forecaster) -> Self {
        Self { name: name.into(), model }
    }
}

impl ForecastScheme for ModelScheme<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn variables(&self) -> Vec<usize> {
        self.model.config.target_columns.clone()
    }

    fn forecast_batch(&self, contexts: &Tensor, steps: usize) -> Result<Tensor> {
        self.model.rollout_batch_normalized(contexts, steps)
    }
}

/// One single-variable model per target column; each forecasts its own
/// column from that column's history alone.
pub struct UnivariateScheme {
    pub models: Vec<(usize, Forecaster)>,
    n: usize,
}

impl UnivariateScheme {
    /// Train one single-column model per entry of `columns` on the training
    /// range of the normalized series.
    pub fn train_per_column(
        series_norm: &TelemetrySeries,
        train_range: Range<usize>,
        columns: &[usize],
        base_config: &ForecasterConfig,
        train_config: &TrainConfig,
    ) -> Result<Self> {
        let mut models = Vec::with_capacity(columns.len());
        for &col in columns {
            let sub = single_column_series(series_norm, col)?;
            let window = WindowConfig::new(base_config.window_len, 1)?;
            let train_rows = slice_rows(&sub, train_range.clone())?;
            let ds = make_windows(&train_rows, &window)?;
            let mut cfg = base_config.clone();
            cfg.n_variables = 1;
            cfg.output_dim = 1;
            cfg.target_columns = vec![0];
            cfg.adjacency = None;
            let mut model = Forecaster::init(cfg, train_config.seed)?;
            train(&mut model, &ds, train_config)?;
            models.push((col, model));
        }
        Ok(Self { models, n: series_norm.cols() })
    }
}

/// A one-column view of a series as its own TelemetrySeries.
pub fn single_column_series(series: &TelemetrySeries, col: usize) -> Result<TelemetrySeries> {
    if col >= series.cols() {
        return Err(Error::Config(format!("column {col} out of {}", series.cols())));
    }
    let rows = series.rows();
    let mut values = Vec::with_capacity(rows);
    let mut missing = Vec::with_capacity(rows);
    for t in 0..rows {
        values.push(series.value(t, col));
        missing.push(series.is_missing(t, col));
    }
    TelemetrySeries::new(vec![series.schema[col].clone()], values, missing)
}

/// Copy a contiguous row range into its own series.
pub fn slice_rows(series: &TelemetrySeries, range: Range<usize>) -> Result<TelemetrySeries> {
    if range.end > series.rows() || range.is_empty() {
        return Err(Error::Data(format!("row range {range:?} out of {} rows", series.rows())));
    }
    let n = series.cols();
    let mut values = Vec::with_capacity(range.len() * n);
    let mut missing = Vec::with_capacity(range.len() * n);
    for t in range {
        for j in 0..n {
            values.push(series.value(t, j));
            missing.push(series.is_missing(t, j));
        }
    }
    TelemetrySeries::new(series.schema.clone(), values, missing)
}

impl ForecastScheme for UnivariateScheme {
    fn name(&self) -> &str {
        "univariate"
    }

    fn variables(&self) -> Vec<usize> {
        self.models.iter().map(|(c, _)| *c).collect()
    }

    fn forecast_batch(&self, contexts: &Tensor, steps: usize) -> Result<Tensor> {
        let shape = contexts.shape();
        let (b, tau, n) = (shape[0], shape[1], shape[2]);
        let mut out = Tensor::zeros(&[b, steps, n]);
        for (col, model) in &self.models {
            // Slice this variable's column out of every context window.
            let col_ctx = tensor::slice(contexts, 2, *col, 1)?; // [B, tau, 1]
            let preds = model.rollout_batch_normalized(&col_ctx, steps)?; // [B, steps, 1]
            for bi in 0..b {
                for s in 0..steps {
                    out.data_mut()[(bi * steps + s) * n + col] = preds.at(&[bi, s, 0]);
                }
            }
            let _ = tau;
        }
        Ok(out)
    }
}

/// Build and evaluate one baseline exactly the way the main model is
/// evaluated. Model-based baselines train on the normalized training range
/// with the supplied configs.
#[allow(clippy::too_many_arguments)]
pub fn run_baseline(
    kind: BaselineKind,
    series_norm: &TelemetrySeries,
    train_range: Range<usize>,
    ctx: &EvalContext<'_>,
    base_config: &ForecasterConfig,
    train_config: &TrainConfig,
    var_order: (usize, usize),
) -> Result<MetricsReport> {
    let n = series_norm.cols();
    match kind {
        BaselineKind::Persistence => eval::evaluate_horizons(&Persistence::new(n), ctx),
        BaselineKind::Varima => {
            let train_rows = slice_rows(series_norm, train_range)?;
            let data = Tensor::new(vec![train_rows.rows(), n], train_rows.values().to_vec())?;
            let model = fit_var(&data, var_order.0, var_order.1)?;
            eval::evaluate_horizons(&VarScheme::new(model, n), ctx)
        }
        BaselineKind::UnivariateGatLlm => {
            let scheme = UnivariateScheme::train_per_column(
                series_norm,
                train_range,
                &ctx.report_columns,
                base_config,
                train_config,
            )?;
            eval::evaluate_horizons(&scheme, ctx)
        }
        BaselineKind::NoGatDecoder => {
            let mut cfg = base_config.clone();
            cfg.use_gat = false;
            let window = WindowConfig::new(cfg.window_len, 1)?;
            let train_rows = slice_rows(series_norm, train_range)?;
            let ds: WindowedDataset = make_windows(&train_rows, &window)?;
            let mut model = Forecaster::init(cfg, train_config.seed)?;
            train(&mut model, &ds, train_config)?;
            eval::evaluate_horizons(&ModelScheme::new("nogat", &model), ctx)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Simulate a VAR(1) with the given coefficient matrix and noise scale.
    pub(crate) fn simulate_var1(a: &[[f64; 2]; 2], noise: f64, t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, noise).unwrap();
        let mut data = Vec::with_capacity(t * 2);
        let (mut x, mut y) = (0.0, 0.0);
        for _ in 0..t {
            let nx = a[0][0] * x + a[0][1] * y + dist.sample(&mut rng);
            let ny = a[1][0] * x + a[1][1] * y + dist.sample(&mut rng);
            x = nx;
            y = ny;
            data.push(x);
            data.push(y);
        }
        Tensor::new(vec![t, 2], data).unwrap()
    }

    #[test]
    fn var1_recovery_within_tolerance() {
        let a = [[0.5, 0.1], [0.0, 0.3]];
        let sim = simulate_var1(&a, 0.1, 5000, 3);
        let model = fit_var(&sim, 1, 0).unwrap();
        assert!(!model.ridge_fallback);
        for r in 0..2 {
            for c in 0..2 {
                let est = model.coefficients[0].at(&[r, c]);
                assert!(
                    (est - a[r][c]).abs() < 0.05,
                    "A[{r}][{c}] = {est}, truth {}",
                    a[r][c]
                );
            }
        }
        assert!(model.intercept.iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn white_noise_recovers_zero_coefficients() {
        let sim = simulate_var1(&[[0.0, 0.0], [0.0, 0.0]], 1.0, 5000, 4);
        let model = fit_var(&sim, 1, 0).unwrap();
        for v in model.coefficients[0].data() {
            assert!(v.abs() < 0.05, "coefficient {v}");
        }
    }

    #[test]
    fn p_zero_reduces_to_differenced_mean() {
        let sim = simulate_var1(&[[0.5, 0.0], [0.0, 0.5]], 0.3, 500, 5);
        let model = fit_var(&sim, 0, 0).unwrap();
        assert!(model.coefficients.is_empty());
        // Forecast is the fitted mean at every step.
        let fc = var_forecast(&model, &sim, 4).unwrap();
        for s in 0..4 {
            for c in 0..2 {
                assert_relative_eq!(fc.at(&[s, c]), model.intercept[c], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn identity_recursion_repeats_last_row() {
        let model = VarModel {
            order_p: 1,
            differencing_d: 0,
            coefficients: vec![Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap()],
            intercept: vec![0.0, 0.0],
            ridge_fallback: false,
        };
        let hist = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let fc = var_forecast(&model, &hist, 3).unwrap();
        for s in 0..3 {
            assert_eq!(fc.at(&[s, 0]), 5.0);
            assert_eq!(fc.at(&[s, 1]), 6.0);
        }
    }

    #[test]
    fn random_walk_flat_forecast_under_differencing() {
        // d=1, p=0, zero intercept: forecasts continue the last level.
        let model = VarModel {
            order_p: 0,
            differencing_d: 1,
            coefficients: vec![],
            intercept: vec![0.0, 0.0],
            ridge_fallback: false,
        };
        let hist = Tensor::new(vec![4, 2], vec![1., 10., 2., 20., 3., 30., 4., 40.]).unwrap();
        let fc = var_forecast(&model, &hist, 3).unwrap();
        for s in 0..3 {
            assert_eq!(fc.at(&[s, 0]), 4.0);
            assert_eq!(fc.at(&[s, 1]), 40.0);
        }
    }

    #[test]
    fn forecast_matches_hand_recursion() {
        let a = [[0.4, 0.2], [0.1, 0.6]];
        let sim = simulate_var1(&a, 0.2, 800, 6);
        let model = fit_var(&sim, 2, 1).unwrap();
        let hist = Tensor::new(vec![20, 2], sim.data()[..40].to_vec()).unwrap();
        let fc = var_forecast(&model, &hist, 5).unwrap();

        // Independent step-by-step recursion with explicit reintegration.
        let rows: Vec<Vec<f64>> = (0..20).map(|r| sim.data()[r * 2..(r + 1) * 2].to_vec()).collect();
        let mut diffs: Vec<Vec<f64>> =
            (1..20).map(|r| vec![rows[r][0] - rows[r - 1][0], rows[r][1] - rows[r - 1][1]]).collect();
        let mut level = rows[19].clone();
        for s in 0..5 {
            let mut next = model.intercept.clone();
            for lag in 0..2 {
                let prev = &diffs[diffs.len() - 1 - lag];
                for r in 0..2 {
                    for c in 0..2 {
                        next[r] += model.coefficients[lag].at(&[r, c]) * prev[c];
                    }
                }
            }
            level = vec![level[0] + next[0], level[1] + next[1]];
            assert_relative_eq!(fc.at(&[s, 0]), level[0], max_relative = 1e-10);
            assert_relative_eq!(fc.at(&[s, 1]), level[1], max_relative = 1e-10);
            diffs.push(next);
        }
    }

    #[test]
    fn one_step_forecast_equals_closed_form() {
        let a = [[0.5, 0.1], [0.0, 0.3]];
        let sim = simulate_var1(&a, 0.1, 1000, 7);
        let model = fit_var(&sim, 1, 0).unwrap();
        let hist = Tensor::new(vec![10, 2], sim.data()[..20].to_vec()).unwrap();
        let fc = var_forecast(&model, &hist, 1).unwrap();
        let last = [hist.at(&[9, 0]), hist.at(&[9, 1])];
        for r in 0..2 {
            let expect = model.intercept[r]
                + model.coefficients[0].at(&[r, 0]) * last[0]
                + model.coefficients[0].at(&[r, 1]) * last[1];
            assert_eq!(fc.at(&[0, r]), expect);
        }
    }

    #[test]
    fn scale_equivariance() {
        let a = [[0.5, 0.1], [0.2, 0.3]];
        let sim = simulate_var1(&a, 0.2, 2000, 8);
        let c = 37.5;
        let mut scaled_data = sim.data().to_vec();
        for (i, v) in scaled_data.iter_mut().enumerate() {
            if i % 2 == 0 {
                *v *= c;
            }
        }
        let scaled = Tensor::new(vec![2000, 2], scaled_data).unwrap();

        let m1 = fit_var(&sim, 1, 0).unwrap();
        let m2 = fit_var(&scaled, 1, 0).unwrap();
        let hist1 = Tensor::new(vec![30, 2], sim.data()[..60].to_vec()).unwrap();
        let mut h2 = hist1.data().to_vec();
        for (i, v) in h2.iter_mut().enumerate() {
            if i % 2 == 0 {
                *v *= c;
            }
        }
        let hist2 = Tensor::new(vec![30, 2], h2).unwrap();
        let f1 = var_forecast(&m1, &hist1, 4).unwrap();
        let f2 = var_forecast(&m2, &hist2, 4).unwrap();
        for s in 0..4 {
            assert_relative_eq!(f2.at(&[s, 0]), c * f1.at(&[s, 0]), max_relative = 1e-8);
            assert_relative_eq!(f2.at(&[s, 1]), f1.at(&[s, 1]), max_relative = 1e-8);
        }
    }

    #[test]
    fn insufficient_data_and_singularity_paths() {
        let tiny = Tensor::new(vec![4, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        assert!(fit_var(&tiny, 2, 0).is_err());

        // A constant series makes the lag columns collinear with the
        // intercept: the ridge fallback must engage.
        let constant = Tensor::new(vec![50, 2], vec![3.0; 100]).unwrap();
        let model = fit_var(&constant, 1, 0).unwrap();
        assert!(model.ridge_fallback);
    }
}
