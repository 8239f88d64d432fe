//! Experiment configuration and the pipelines behind the CLI commands:
//! load/generate -> interpolate -> split -> normalize -> window -> train ->
//! evaluate, all reproducible from (config, seed).

use crate::baselines::{run_baseline, BaselineKind, ModelScheme};
use crate::error::{Error, Result};
use crate::eval::{self, config_digest, EvalContext, MetricsReport};
use crate::forecaster::{
    load_checkpoint, save_checkpoint, train_with_validation, Forecaster, ForecasterConfig,
    TrainConfig,
};
use crate::gat::GatConfig;
use crate::backbone::BackboneConfig;
use crate::numerics::tensor::Tensor;
use crate::telemetry::{
    canonical_schema, chronological_split, column_index, fit_normalizer, generate_synthetic,
    interpolate_missing, load_csv, make_windows, normalize, write_csv, NormalizationStats,
    SyntheticConfig, TelemetrySeries, WindowConfig, REPORT_VARIABLES,
};
use rayon::prelude::*;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Required when source = "csv".
    pub path: Option<String>,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: DataSource::Synthetic, path: None, synthetic: SyntheticConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.8, validation: 0.1, test: 0.1 }
    }
}

/// Model block of the config file; desk-scale values by default. The
/// full-scale settings (12 layers, 768 dims, 1024-wide 16-head attention
/// embedding, batch 512, 500 epochs) are valid inputs here.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub gat_hidden: usize,
    pub gat_heads: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub use_gat: bool,
    pub nonlinear_head: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            gat_hidden: 64,
            gat_heads: 4,
            layers: 2,
            d_model: 64,
            heads: 4,
            ff_dim: 256,
            use_gat: true,
            nonlinear_head: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub schemes: Vec<String>,
    pub horizon: usize,
    pub report_variables: Vec<String>,
    pub var_order_p: usize,
    pub var_order_d: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            schemes: vec![
                "gatllm".into(),
                "nogat".into(),
                "univariate".into(),
                "varima".into(),
                "persistence".into(),
            ],
            horizon: 10,
            report_variables: REPORT_VARIABLES.iter().map(|s| s.to_string()).collect(),
            var_order_p: 2,
            var_order_d: 0,
        }
    }
}

/// The whole experiment file. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub data: DataConfig,
    pub window: WindowConfig,
    pub split: SplitConfig,
    pub interpolation_points: usize,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub evaluate: EvaluateSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "runs/default".into(),
            data: DataConfig::default(),
            window: WindowConfig { window_len: 20, stride: 1 },
            split: SplitConfig::default(),
            interpolation_points: 4,
            model: ModelSection::default(),
            train: TrainConfig::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window.window_len < 2 || self.window.stride < 1 {
            return Err(Error::Config("window: window_len >= 2 and stride >= 1 required".into()));
        }
        if self.interpolation_points == 0 {
            return Err(Error::Config("interpolation_points must be >= 1".into()));
        }
        if matches!(self.data.source, DataSource::Csv) && self.data.path.is_none() {
            return Err(Error::Config("data.source = \"csv\" requires data.path".into()));
        }
        self.data.synthetic.validate()?;
        self.train.validate()?;
        if self.evaluate.horizon == 0 {
            return Err(Error::Config("evaluate.horizon must be >= 1".into()));
        }
        for s in &self.evaluate.schemes {
            if s != "gatllm" {
                BaselineKind::parse(s)?;
            }
        }
        self.forecaster_config(9).validate()?;
        Ok(())
    }

    /// Canonical serialized form, used for digests.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn forecaster_config(&self, n_variables: usize) -> ForecasterConfig {
        ForecasterConfig {
            n_variables,
            window_len: self.window.window_len,
            gat: GatConfig { in_dim: 1, hidden_dim: self.model.gat_hidden, heads: self.model.gat_heads },
            backbone: BackboneConfig {
                layers: self.model.layers,
                d_model: self.model.d_model,
                heads: self.model.heads,
                ff_dim: self.model.ff_dim,
                max_seq_len: self.window.window_len,
            },
            output_dim: n_variables,
            target_columns: (0..n_variables).collect(),
            rollout_steps: self.evaluate.horizon,
            use_gat: self.model.use_gat,
            nonlinear_head: self.model.nonlinear_head,
            leaky_slope: crate::gat::DEFAULT_LEAKY_SLOPE,
            adjacency: None,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

/// Data after repair, split, and normalization.
pub struct Prepared {
    pub series_norm: TelemetrySeries,
    pub stats: NormalizationStats,
    pub ranges: [Range<usize>; 3],
}

/// Acquire the raw series named by the config (synthetic or CSV).
pub fn acquire_series(cfg: &ExperimentConfig) -> Result<TelemetrySeries> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let mut synth = cfg.data.synthetic.clone();
            synth.seed = cfg.seed;
            generate_synthetic(&synth)
        }
        DataSource::Csv => {
            let path = cfg.data.path.as_ref().expect("validated");
            load_csv(Path::new(path), &canonical_schema())
        }
    }
}

/// Full preprocessing: repair gaps, split chronologically, normalize with
/// train-rows-only statistics.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let raw = acquire_series(cfg)?;
    let repaired = if raw.missing_count() > 0 {
        interpolate_missing(&raw, cfg.interpolation_points)?
    } else {
        raw
    };
    let ranges = chronological_split(
        repaired.rows(),
        (cfg.split.train, cfg.split.validation, cfg.split.test),
    )?;
    let stats = fit_normalizer(&repaired, ranges[0].clone())?;
    let series_norm = normalize(&repaired, &stats)?;
    Ok(Prepared { series_norm, stats, ranges })
}

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub loss_csv_path: PathBuf,
    pub history: Vec<f64>,
    pub model: Forecaster,
}

/// Train the multivariate model on the prepared training range and write the
/// checkpoint plus a per-epoch loss CSV.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let prepared = prepare(cfg)?;
    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir)?;

    let model = train_main_model(cfg, &prepared)?;

    let checkpoint_path = out_dir.join("checkpoint.ckpt");
    save_checkpoint(&model.0, &checkpoint_path)?;
    let loss_csv_path = out_dir.join("loss.csv");
    let mut f = std::fs::File::create(&loss_csv_path)?;
    writeln!(f, "epoch,train_mse")?;
    for (i, l) in model.1.iter().enumerate() {
        writeln!(f, "{},{}", i + 1, l)?;
    }
    Ok(TrainOutcome {
        checkpoint_path,
        loss_csv_path,
        history: model.1,
        model: model.0,
    })
}

/// Train the gatllm model for this experiment (shared by train/evaluate).
pub fn train_main_model(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<(Forecaster, Vec<f64>)> {
    let n = prepared.series_norm.cols();
    let fc_config = cfg.forecaster_config(n);
    let mut model = Forecaster::init(fc_config, cfg.seed)?;
    model.norm_stats = Some(prepared.stats.clone());

    let train_rows = crate::baselines::slice_rows(&prepared.series_norm, prepared.ranges[0].clone())?;
    let ds = make_windows(&train_rows, &cfg.window)?;
    let val_ds = if cfg.train.patience.is_some() {
        let val_rows = crate::baselines::slice_rows(&prepared.series_norm, prepared.ranges[1].clone())?;
        Some(make_windows(&val_rows, &cfg.window)?)
    } else {
        None
    };
    let history = train_with_validation(&mut model, &ds, val_ds.as_ref(), &cfg.train_config())?;
    Ok((model, history))
}

/// Generate a synthetic series and write it as CSV. Returns (rows, cols).
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<(usize, usize)> {
    let mut synth = cfg.data.synthetic.clone();
    synth.seed = cfg.seed;
    let series = generate_synthetic(&synth)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_csv(&series, out)?;
    Ok((series.rows(), series.cols()))
}

/// Load a checkpoint, take the final window of `data` as context, and write
/// an l-step forecast CSV in original units. Returns the forecast matrix.
pub fn cmd_predict(
    checkpoint: &Path,
    data: &Path,
    steps: usize,
    interpolation_points: usize,
    out: &Path,
) -> Result<Tensor> {
    let model = load_checkpoint(checkpoint)?;
    let n = model.config.n_variables;
    let schema = canonical_schema();
    if n != schema.len() {
        return Err(Error::Config(format!(
            "checkpoint predicts {n} variables; CSV prediction expects the canonical {} columns",
            schema.len()
        )));
    }
    let raw = load_csv(data, &schema)?;
    let tau = model.config.window_len;
    if raw.rows() < tau {
        return Err(Error::Data(format!(
            "context of {} rows is shorter than the model window {tau}",
            raw.rows()
        )));
    }
    let repaired =
        if raw.missing_count() > 0 { interpolate_missing(&raw, interpolation_points)? } else { raw };
    let stats = model
        .norm_stats
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no normalization stats".into()))?;
    let norm = normalize(&repaired, &stats)?;
    let start = norm.rows() - tau;
    let mut window = Vec::with_capacity(tau * n);
    for t in start..norm.rows() {
        window.extend_from_slice(norm.row(t));
    }
    let window = Tensor::new(vec![tau, n], window)?;
    let forecast = model.rollout(&window, steps)?;

    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::fs::File::create(out)?;
    let names: Vec<String> =
        forecast.columns.iter().map(|&c| repaired.schema[c].name.clone()).collect();
    writeln!(f, "step,{}", names.join(","))?;
    for s in 0..steps {
        let row: Vec<String> =
            (0..forecast.columns.len()).map(|j| format!("{}", forecast.values.at(&[s, j]))).collect();
        writeln!(f, "{},{}", s + 1, row.join(","))?;
    }
    Ok(forecast.values)
}

/// Run the selected schemes over the test split and emit per-scheme report
/// CSVs, the comparison table, and per-variable SVGs.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
) -> Result<(Vec<MetricsReport>, Vec<PathBuf>)> {
    let prepared = prepare(cfg)?;
    let reports = run_schemes(cfg, &prepared, &cfg.evaluate.schemes, checkpoint)?;

    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for r in &reports {
        let path = out_dir.join(format!("report_{}.csv", r.scheme));
        eval::write_report_csv(r, &path)?;
        written.push(path);
    }
    written.extend(eval::compare(&reports, out_dir)?);
    Ok((reports, written))
}

/// Evaluate the named schemes on prepared data. Schemes are independent and
/// run in parallel; results keep the requested order.
pub fn run_schemes(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    schemes: &[String],
    checkpoint: Option<&Path>,
) -> Result<Vec<MetricsReport>> {
    let report_columns = resolve_report_columns(&prepared.series_norm, &cfg.evaluate.report_variables)?;
    let digest = config_digest(&cfg.to_toml());
    let ctx = EvalContext {
        series: &prepared.series_norm,
        stats: &prepared.stats,
        test_range: prepared.ranges[2].clone(),
        window_len: cfg.window.window_len,
        horizon: cfg.evaluate.horizon,
        report_columns,
        seed: cfg.seed,
        config_digest: digest,
    };
    let n = prepared.series_norm.cols();
    let fc_config = cfg.forecaster_config(n);
    let train_config = cfg.train_config();

    // The main model loads from a checkpoint when given one; otherwise it
    // trains here, like every model-based baseline.
    let gatllm_model: Option<Forecaster> = if schemes.iter().any(|s| s == "gatllm") {
        match checkpoint {
            Some(path) => {
                let model = crate::forecaster::load_checkpoint_expecting(path, &fc_config)?;
                Some(model)
            }
            None => Some(train_main_model(cfg, prepared)?.0),
        }
    } else {
        None
    };

    let results: Vec<Result<MetricsReport>> = schemes
        .par_iter()
        .map(|name| -> Result<MetricsReport> {
            if name == "gatllm" {
                let model = gatllm_model.as_ref().expect("trained above");
                eval::evaluate_horizons(&ModelScheme::new("gatllm", model), &ctx)
            } else {
                run_baseline(
                    BaselineKind::parse(name)?,
                    &prepared.series_norm,
                    prepared.ranges[0].clone(),
                    &ctx,
                    &fc_config,
                    &train_config,
                    (cfg.evaluate.var_order_p, cfg.evaluate.var_order_d),
                )
            }
        })
        .collect();
    results.into_iter().collect()
}

fn resolve_report_columns(series: &TelemetrySeries, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|name| {
            column_index(&series.schema, name)
                .ok_or_else(|| Error::Config(format!("report variable `{name}` not in schema")))
        })
        .collect()
}

/// Merge previously written report CSVs into comparison artifacts.
pub fn cmd_compare(report_paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let reports: Vec<MetricsReport> =
        report_paths.iter().map(|p| eval::read_report_csv(p)).collect::<Result<_>>()?;
    eval::compare(&reports, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.synthetic.length = 400;
        cfg.window = WindowConfig { window_len: 8, stride: 1 };
        cfg.model = ModelSection {
            gat_hidden: 8,
            gat_heads: 2,
            layers: 1,
            d_model: 16,
            heads: 2,
            ff_dim: 32,
            use_gat: true,
            nonlinear_head: false,
        };
        cfg.train = TrainConfig { epochs: 2, batch_size: 32, ..Default::default() };
        cfg.evaluate.horizon = 3;
        cfg
    }

    #[test]
    fn toml_round_trip_and_unknown_key_rejection() {
        let cfg = small_cfg();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);

        let bad = format!("{text}\nbogus_key = 1\n");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let bad_section = text.replace("[model]", "[model]\nnot_a_field = true");
        assert!(ExperimentConfig::from_toml(&bad_section).is_err());
    }

    #[test]
    fn prepare_pipeline_shapes() {
        let mut cfg = small_cfg();
        cfg.data.synthetic.missing_prob = 0.02;
        let prepared = prepare(&cfg).unwrap();
        assert_eq!(prepared.series_norm.rows(), 400);
        assert_eq!(prepared.series_norm.missing_count(), 0);
        assert_eq!(prepared.ranges[0], 0..320);
        assert_eq!(prepared.ranges[2], 360..400);
        // Normalized training rows live in [0, 1].
        for t in 0..320 {
            for j in 0..9 {
                let v = prepared.series_norm.value(t, j);
                assert!((-1e-12..=1.0 + 1e-12).contains(&v), "({t},{j}) = {v}");
            }
        }
    }

    #[test]
    fn generate_is_deterministic_per_config() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        let (r, c) = cmd_generate(&cfg, &p1).unwrap();
        assert_eq!((r, c), (400, 9));
        cmd_generate(&cfg, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let mut other = cfg.clone();
        other.seed = 1;
        let p3 = dir.path().join("c.csv");
        cmd_generate(&other, &p3).unwrap();
        assert_ne!(std::fs::read(&p1).unwrap(), std::fs::read(&p3).unwrap());
    }

    #[test]
    fn train_then_predict_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.out_dir = dir.path().join("run").to_string_lossy().into_owned();
        let outcome = cmd_train(&cfg).unwrap();
        assert!(outcome.checkpoint_path.exists());
        assert!(outcome.loss_csv_path.exists());
        assert_eq!(outcome.history.len(), 2);

        // Write a context CSV from the same generator and predict.
        let data_path = dir.path().join("ctx.csv");
        cmd_generate(&cfg, &data_path).unwrap();
        let fc_path = dir.path().join("forecast.csv");
        let values =
            cmd_predict(&outcome.checkpoint_path, &data_path, 5, 4, &fc_path).unwrap();
        assert_eq!(values.shape(), &[5, 9]);
        let text = std::fs::read_to_string(&fc_path).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("step,DLBw,"));

        // Prefix property: step 1 of a 5-step forecast equals a 1-step run.
        let fc1_path = dir.path().join("forecast1.csv");
        let values1 = cmd_predict(&outcome.checkpoint_path, &data_path, 1, 4, &fc1_path).unwrap();
        assert_eq!(values1.data(), &values.data()[..9]);
    }

    #[test]
    fn evaluate_small_pair_of_schemes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.out_dir = dir.path().join("run").to_string_lossy().into_owned();
        cfg.evaluate.schemes = vec!["persistence".into(), "varima".into()];
        let (reports, files) = cmd_evaluate(&cfg, None).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].scheme, "persistence");
        assert_eq!(reports[1].scheme, "varima");
        for r in &reports {
            assert_eq!(r.cells.len(), 4 * 3); // 4 report variables x horizon 3
            for c in &r.cells {
                assert!(c.n > 0);
                assert!(c.mae_norm <= c.rmse_norm + 1e-15);
            }
        }
        assert!(files.iter().any(|p| p.ends_with("comparison.csv")));
        assert!(files.iter().any(|p| p.ends_with("MCS_horizon.svg")));
    }
}
