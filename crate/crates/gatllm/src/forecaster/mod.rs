//! The end-to-end forecaster: per-timestep graph attention over the variable
//! graph, token projection, learnable positions, decoder stack, and an output
//! head predicting each position's next-step target values. Multi-step
//! forecasts come from autoregressive rollout.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
pub use train::{train, train_with_validation, TrainConfig};

use crate::backbone::{
    add_positions, decoder_forward, embed_tokens, Decoder, DecoderVars, PositionEmbedding,
    BackboneConfig,
};
use crate::error::{Error, Result};
use crate::gat::{self, GatConfig, GatLayer, GatVars, VariableGraph, DEFAULT_LEAKY_SLOPE};
use crate::numerics::tensor::{self, Tensor};
use crate::numerics::{Tape, Var};
use crate::telemetry::NormalizationStats;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT_STD: f64 = 0.02;

/// Model hyperparameters. `target_columns` selects which of the `n_variables`
/// input columns the head predicts; autoregressive rollout requires all of
/// them (the window must be refillable).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ForecasterConfig {
    pub n_variables: usize,
    pub window_len: usize,
    pub gat: GatConfig,
    pub backbone: BackboneConfig,
    pub output_dim: usize,
    pub target_columns: Vec<usize>,
    pub rollout_steps: usize,
    /// false = ablation: raw N-vector lifted straight to d_model.
    pub use_gat: bool,
    /// One hidden gelu layer in the output head instead of a plain affine map.
    pub nonlinear_head: bool,
    pub leaky_slope: f64,
    /// None = complete variable graph; row-major adjacency otherwise.
    pub adjacency: Option<Vec<bool>>,
}

impl ForecasterConfig {
    /// Desk-scale defaults for an N-variable feed.
    pub fn desk_default(n_variables: usize, window_len: usize) -> Self {
        Self {
            n_variables,
            window_len,
            gat: GatConfig { in_dim: 1, hidden_dim: 64, heads: 4 },
            backbone: BackboneConfig {
                layers: 2,
                d_model: 64,
                heads: 4,
                ff_dim: 256,
                max_seq_len: window_len,
            },
            output_dim: n_variables,
            target_columns: (0..n_variables).collect(),
            rollout_steps: 10,
            use_gat: true,
            nonlinear_head: false,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            adjacency: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_variables == 0 {
            return Err(Error::Config("n_variables must be positive".into()));
        }
        if self.window_len < 2 {
            return Err(Error::Config("window_len must be >= 2".into()));
        }
        self.gat.validate()?;
        if self.gat.in_dim != 1 {
            return Err(Error::Config("gat.in_dim must be 1 (node features are scalar values)".into()));
        }
        self.backbone.validate()?;
        if self.backbone.max_seq_len < self.window_len {
            return Err(Error::Config(format!(
                "backbone.max_seq_len {} < window_len {}",
                self.backbone.max_seq_len, self.window_len
            )));
        }
        if self.output_dim == 0 || self.output_dim > self.n_variables {
            return Err(Error::Config(format!(
                "output_dim {} must be in 1..={}",
                self.output_dim, self.n_variables
            )));
        }
        if self.target_columns.len() != self.output_dim {
            return Err(Error::Config("target_columns length must equal output_dim".into()));
        }
        let mut seen = vec![false; self.n_variables];
        for &c in &self.target_columns {
            if c >= self.n_variables || seen[c] {
                return Err(Error::Config(format!("target column {c} out of range or repeated")));
            }
            seen[c] = true;
        }
        if self.rollout_steps == 0 {
            return Err(Error::Config("rollout_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Width of the flattened per-timestep features entering the token
    /// projection.
    pub fn embed_in_dim(&self) -> usize {
        if self.use_gat {
            self.n_variables * self.gat.hidden_dim
        } else {
            self.n_variables
        }
    }

    pub fn graph(&self) -> Result<VariableGraph> {
        match &self.adjacency {
            None => Ok(VariableGraph::complete(self.n_variables)),
            Some(adj) => VariableGraph::from_adjacency(self.n_variables, adj.clone()),
        }
    }

    /// Supervised next-step positions per window under teacher forcing.
    pub fn supervised_positions(&self) -> usize {
        self.window_len - 1
    }
}

/// Multi-step forecast in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// [steps, output_dim], denormalized.
    pub values: Tensor,
    /// Horizon offsets from the window end, in milliseconds.
    pub horizon_ms: Vec<u64>,
    pub columns: Vec<usize>,
}

/// Trained (or trainable) forecaster: parameters plus the normalization
/// statistics its inputs were scaled with.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    pub config: ForecasterConfig,
    pub graph: VariableGraph,
    pub gat: Option<GatLayer>,
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub pos: PositionEmbedding,
    pub decoder: Decoder,
    pub head_hidden_w: Option<Tensor>,
    pub head_hidden_b: Option<Tensor>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub norm_stats: Option<NormalizationStats>,
}

impl Forecaster {
    /// Deterministic random initialization from a seed.
    pub fn init(config: ForecasterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let graph = config.graph()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gat = if config.use_gat {
            Some(GatLayer::init(config.gat, config.leaky_slope, INIT_STD, &mut rng)?)
        } else {
            None
        };
        let embed_in = config.embed_in_dim();
        let d = config.backbone.d_model;
        let embed_w = Tensor::randn(&[embed_in, d], INIT_STD, &mut rng);
        let embed_b = Tensor::zeros(&[d]);
        let pos = PositionEmbedding::init(&config.backbone, INIT_STD, &mut rng);
        let decoder = Decoder::init(config.backbone, INIT_STD, &mut rng)?;
        let (head_hidden_w, head_hidden_b) = if config.nonlinear_head {
            (Some(Tensor::randn(&[d, d], INIT_STD, &mut rng)), Some(Tensor::zeros(&[d])))
        } else {
            (None, None)
        };
        let head_w = Tensor::randn(&[d, config.output_dim], INIT_STD, &mut rng);
        let head_b = Tensor::zeros(&[config.output_dim]);
        Ok(Self {
            config,
            graph,
            gat,
            embed_w,
            embed_b,
            pos,
            decoder,
            head_hidden_w,
            head_hidden_b,
            head_w,
            head_b,
            norm_stats: None,
        })
    }

    /// Visit every parameter tensor with its name, in the canonical order
    /// shared by the optimizer, the recorded forward pass, and checkpoints.
    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        if let Some(g) = &self.gat {
            f("gat.weight".into(), &g.weight);
            f("gat.attn_src".into(), &g.attn_src);
            f("gat.attn_dst".into(), &g.attn_dst);
        }
        f("embed.w".into(), &self.embed_w);
        f("embed.b".into(), &self.embed_b);
        f("pos.table".into(), &self.pos.table);
        for (i, b) in self.decoder.blocks.iter().enumerate() {
            b.visit(&mut |name, t| f(format!("block{i}.{name}"), t));
        }
        f("final.gain".into(), &self.decoder.final_gain);
        f("final.bias".into(), &self.decoder.final_bias);
        if let (Some(w), Some(b)) = (&self.head_hidden_w, &self.head_hidden_b) {
            f("head.hidden_w".into(), w);
            f("head.hidden_b".into(), b);
        }
        f("head.w".into(), &self.head_w);
        f("head.b".into(), &self.head_b);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        if let Some(g) = &mut self.gat {
            f("gat.weight".into(), &mut g.weight);
            f("gat.attn_src".into(), &mut g.attn_src);
            f("gat.attn_dst".into(), &mut g.attn_dst);
        }
        f("embed.w".into(), &mut self.embed_w);
        f("embed.b".into(), &mut self.embed_b);
        f("pos.table".into(), &mut self.pos.table);
        for (i, b) in self.decoder.blocks.iter_mut().enumerate() {
            b.visit_mut(&mut |name, t| f(format!("block{i}.{name}"), t));
        }
        f("final.gain".into(), &mut self.decoder.final_gain);
        f("final.bias".into(), &mut self.decoder.final_bias);
        if let (Some(w), Some(b)) = (&mut self.head_hidden_w, &mut self.head_hidden_b) {
            f("head.hidden_w".into(), w);
            f("head.hidden_b".into(), b);
        }
        f("head.w".into(), &mut self.head_w);
        f("head.b".into(), &mut self.head_b);
    }

    pub fn param_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Mutable borrows of every parameter, in `visit_params` order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let Forecaster {
            gat,
            embed_w,
            embed_b,
            pos,
            decoder,
            head_hidden_w,
            head_hidden_b,
            head_w,
            head_b,
            ..
        } = self;
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Some(g) = gat {
            out.push(&mut g.weight);
            out.push(&mut g.attn_src);
            out.push(&mut g.attn_dst);
        }
        out.push(embed_w);
        out.push(embed_b);
        out.push(&mut pos.table);
        for b in &mut decoder.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut decoder.final_gain);
        out.push(&mut decoder.final_bias);
        if let (Some(w), Some(b)) = (head_hidden_w, head_hidden_b) {
            out.push(w);
            out.push(b);
        }
        out.push(head_w);
        out.push(head_b);
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }

    /// Register every parameter on `tape` (canonical order) and return both
    /// the structured handles and the flat list aligned with `visit_params`.
    pub fn register<'t>(&self, tape: &'t Tape) -> (ForecasterVars<'t>, Vec<Var<'t>>) {
        let mut flat = Vec::new();
        let gat = self.gat.as_ref().map(|g| {
            let vars = GatVars {
                weight: tape.param(g.weight.clone()),
                attn_src: tape.param(g.attn_src.clone()),
                attn_dst: tape.param(g.attn_dst.clone()),
            };
            flat.extend_from_slice(&[vars.weight, vars.attn_src, vars.attn_dst]);
            vars
        });
        let embed_w = tape.param(self.embed_w.clone());
        let embed_b = tape.param(self.embed_b.clone());
        let pos = tape.param(self.pos.table.clone());
        flat.extend_from_slice(&[embed_w, embed_b, pos]);
        let decoder = DecoderVars::register(tape, &self.decoder);
        flat.extend(decoder.list());
        let head_hidden = match (&self.head_hidden_w, &self.head_hidden_b) {
            (Some(w), Some(b)) => {
                let vars = (tape.param(w.clone()), tape.param(b.clone()));
                flat.push(vars.0);
                flat.push(vars.1);
                Some(vars)
            }
            _ => None,
        };
        let head_w = tape.param(self.head_w.clone());
        let head_b = tape.param(self.head_b.clone());
        flat.push(head_w);
        flat.push(head_b);
        (ForecasterVars { gat, embed_w, embed_b, pos, decoder, head_hidden, head_w, head_b }, flat)
    }

    /// Recorded forward pass over a window batch [B, tau, N] -> [B, tau, M].
    /// Position t's output predicts row t+1's target columns.
    pub fn forward_on_tape<'t>(
        &self,
        tape: &'t Tape,
        vars: &ForecasterVars<'t>,
        x: Var<'t>,
    ) -> Var<'t> {
        let shape = x.shape();
        let (batch, tau, n) = (shape[0], shape[1], shape[2]);
        let feats = match (&vars.gat, self.gat.as_ref()) {
            (Some(gvars), Some(layer)) => {
                let nodes = x.reshape(vec![batch * tau, n, 1]);
                let out = gat::forward_on_tape(tape, *gvars, nodes, &self.graph, &layer.config, layer.leaky_slope);
                out.reshape(vec![batch, tau, n * layer.config.hidden_dim])
            }
            _ => x,
        };
        let tokens = embed_tokens(feats, vars.embed_w, vars.embed_b);
        let tokens = add_positions(tokens, vars.pos, tau).expect("window_len <= max_seq_len");
        let dec = decoder_forward(tape, &vars.decoder, tokens, &self.config.backbone, None);
        let h = match vars.head_hidden {
            Some((w, b)) => dec.matmul(w).add(b).gelu(),
            None => dec,
        };
        h.matmul(vars.head_w).add(vars.head_b)
    }

    fn check_window(&self, window: &Tensor) -> Result<()> {
        let (tau, n) = (self.config.window_len, self.config.n_variables);
        if window.shape() != [tau, n] {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("window {:?} vs expected [{tau}, {n}]", window.shape()),
            });
        }
        if !window.is_finite() {
            return Err(Error::Data("forward: window contains non-finite values".into()));
        }
        Ok(())
    }

    /// Per-position next-step predictions for one normalized window.
    pub fn forward(&self, window: &Tensor) -> Result<Tensor> {
        self.check_window(window)?;
        let (tau, n) = (self.config.window_len, self.config.n_variables);
        let batched = self.forward_batch(&window.reshaped(vec![1, tau, n])?)?;
        batched.reshaped(vec![tau, self.config.output_dim])
    }

    /// Value-level batched forward [B, tau, N] -> [B, tau, M].
    pub fn forward_batch(&self, windows: &Tensor) -> Result<Tensor> {
        if windows.rank() != 3
            || windows.shape()[1] != self.config.window_len
            || windows.shape()[2] != self.config.n_variables
        {
            return Err(Error::Shape {
                op: "forward_batch",
                detail: format!(
                    "windows {:?} vs expected [B, {}, {}]",
                    windows.shape(),
                    self.config.window_len,
                    self.config.n_variables
                ),
            });
        }
        if !windows.is_finite() {
            return Err(Error::Data("forward_batch: non-finite input".into()));
        }
        let tape = Tape::new();
        let (vars, _) = self.register(&tape);
        let x = tape.constant(windows.clone());
        Ok(self.forward_on_tape(&tape, &vars, x).value())
    }

    /// The final position's output: the one-step-ahead prediction.
    pub fn predict_one_step(&self, window: &Tensor) -> Result<Tensor> {
        let out = self.forward(window)?;
        tensor::slice(&out, 0, self.config.window_len - 1, 1)
    }

    fn require_autoregressive(&self) -> Result<()> {
        if self.config.output_dim != self.config.n_variables {
            return Err(Error::Config(format!(
                "autoregressive rollout needs all {} variables predicted, model outputs {}",
                self.config.n_variables, self.config.output_dim
            )));
        }
        Ok(())
    }

    /// Batched rollout in normalized units: predict, append, slide, `steps`
    /// times. Returns [B, steps, N].
    pub fn rollout_batch_normalized(&self, windows: &Tensor, steps: usize) -> Result<Tensor> {
        if steps == 0 {
            return Err(Error::Config("rollout steps must be >= 1".into()));
        }
        self.require_autoregressive()?;
        let (tau, n) = (self.config.window_len, self.config.n_variables);
        let batch = windows.shape()[0];
        let mut current = windows.clone();
        let mut step_preds = Vec::with_capacity(steps);
        for _ in 0..steps {
            let out = self.forward_batch(&current)?; // [B, tau, M]
            let last = tensor::slice(&out, 1, tau - 1, 1)?; // [B, 1, M]
            // Scatter the M predictions into an N-row in column order.
            let mut next_row = Tensor::zeros(&[batch, 1, n]);
            for b in 0..batch {
                for (i, &c) in self.config.target_columns.iter().enumerate() {
                    next_row.data_mut()[b * n + c] = last.data()[b * n + i];
                }
            }
            step_preds.push(next_row.clone());
            let tail = tensor::slice(&current, 1, 1, tau - 1)?;
            current = tensor::concat(&[&tail, &next_row], 1)?;
        }
        let refs: Vec<&Tensor> = step_preds.iter().collect();
        tensor::concat(&refs, 1)
    }

    /// Autoregressive multi-step forecast for one normalized window, reported
    /// in original units via the model's normalization statistics.
    pub fn rollout(&self, window: &Tensor, steps: usize) -> Result<Forecast> {
        self.check_window(window)?;
        let stats = self.norm_stats.as_ref().ok_or_else(|| {
            Error::Config("rollout: model carries no normalization statistics".into())
        })?;
        let (tau, n) = (self.config.window_len, self.config.n_variables);
        let normalized =
            self.rollout_batch_normalized(&window.reshaped(vec![1, tau, n])?, steps)?;
        let mut values = normalized.reshaped(vec![steps, n])?;
        for s in 0..steps {
            for j in 0..n {
                let v = stats.denormalize_value(j, values.at(&[s, j]));
                values.data_mut()[s * n + j] = v;
            }
        }
        Ok(Forecast {
            values,
            horizon_ms: (1..=steps as u64).collect(),
            columns: self.config.target_columns.clone(),
        })
    }
}

/// Tape handles for all model parameters.
pub struct ForecasterVars<'t> {
    pub gat: Option<GatVars<'t>>,
    pub embed_w: Var<'t>,
    pub embed_b: Var<'t>,
    pub pos: Var<'t>,
    pub decoder: DecoderVars<'t>,
    pub head_hidden: Option<(Var<'t>, Var<'t>)>,
    pub head_w: Var<'t>,
    pub head_b: Var<'t>,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(super) fn tiny_config(n: usize, tau: usize) -> ForecasterConfig {
        ForecasterConfig {
            n_variables: n,
            window_len: tau,
            gat: GatConfig { in_dim: 1, hidden_dim: 4, heads: 2 },
            backbone: BackboneConfig { layers: 1, d_model: 8, heads: 2, ff_dim: 16, max_seq_len: tau },
            output_dim: n,
            target_columns: (0..n).collect(),
            rollout_steps: 3,
            use_gat: true,
            nonlinear_head: false,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            adjacency: None,
        }
    }

    fn identity_stats(n: usize) -> NormalizationStats {
        NormalizationStats { min: vec![0.0; n], max: vec![1.0; n] }
    }

    fn random_window(tau: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[tau, n], 0.3, &mut rng).map(|v| v + 0.5)
    }

    #[test]
    fn forward_shape_and_one_step_definition() {
        let model = Forecaster::init(tiny_config(3, 5), 0).unwrap();
        let w = random_window(5, 3, 1);
        let out = model.forward(&w).unwrap();
        assert_eq!(out.shape(), &[5, 3]);
        let one = model.predict_one_step(&w).unwrap();
        assert_eq!(one.shape(), &[1, 3]);
        assert_eq!(one.data(), &out.data()[4 * 3..]);
    }

    #[test]
    fn forward_rejects_bad_windows() {
        let model = Forecaster::init(tiny_config(3, 5), 0).unwrap();
        assert!(model.forward(&Tensor::zeros(&[4, 3])).is_err());
        let mut w = random_window(5, 3, 2);
        w.data_mut()[0] = f64::NAN;
        assert!(model.forward(&w).is_err());
    }

    #[test]
    fn causality_through_full_pipeline() {
        let model = Forecaster::init(tiny_config(3, 6), 3).unwrap();
        let w = random_window(6, 3, 4);
        let base = model.forward(&w).unwrap();
        for t_perturb in 1..6 {
            let mut w2 = w.clone();
            for t in t_perturb..6 {
                for j in 0..3 {
                    let i = t * 3 + j;
                    w2.data_mut()[i] += 0.25;
                }
            }
            let out = model.forward(&w2).unwrap();
            let split = t_perturb * 3;
            assert_eq!(&out.data()[..split], &base.data()[..split], "perturb at {t_perturb}");
        }
    }

    #[test]
    fn rollout_step_one_equals_predict_one_step() {
        let mut model = Forecaster::init(tiny_config(3, 5), 5).unwrap();
        model.norm_stats = Some(identity_stats(3));
        let w = random_window(5, 3, 6);
        let fc = model.rollout(&w, 1).unwrap();
        let one = model.predict_one_step(&w).unwrap();
        assert_eq!(fc.values.data(), one.data());
        assert_eq!(fc.horizon_ms, vec![1]);
    }

    #[test]
    fn rollout_matches_external_predict_append_slide() {
        let mut model = Forecaster::init(tiny_config(2, 4), 7).unwrap();
        model.norm_stats = Some(identity_stats(2));
        let w = random_window(4, 2, 8);
        let steps = 5;
        let fc = model.rollout(&w, steps).unwrap();
        assert_eq!(fc.values.shape(), &[steps, 2]);

        // External oracle: predict, append, drop the oldest row, repeat.
        let mut rows: Vec<Vec<f64>> = (0..4).map(|t| w.data()[t * 2..(t + 1) * 2].to_vec()).collect();
        for s in 0..steps {
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let win = Tensor::new(vec![4, 2], flat).unwrap();
            let pred = model.predict_one_step(&win).unwrap();
            assert_eq!(&fc.values.data()[s * 2..(s + 1) * 2], pred.data(), "step {s}");
            rows.remove(0);
            rows.push(pred.data().to_vec());
        }
    }

    #[test]
    fn batched_rollout_bitwise_matches_per_window() {
        let model = {
            let mut m = Forecaster::init(tiny_config(3, 5), 9).unwrap();
            m.norm_stats = Some(identity_stats(3));
            m
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let windows = Tensor::randn(&[4, 5, 3], 0.4, &mut rng);
        let batched = model.rollout_batch_normalized(&windows, 3).unwrap();
        for b in 0..4 {
            let one = tensor::slice(&windows, 0, b, 1).unwrap();
            let solo = model.rollout_batch_normalized(&one, 3).unwrap();
            assert_eq!(solo.data(), &batched.data()[b * 9..(b + 1) * 9], "window {b}");
        }
    }

    #[test]
    fn rollout_requires_full_variable_coverage() {
        let mut cfg = tiny_config(3, 5);
        cfg.output_dim = 2;
        cfg.target_columns = vec![0, 2];
        let mut model = Forecaster::init(cfg, 11).unwrap();
        model.norm_stats = Some(identity_stats(3));
        let w = random_window(5, 3, 12);
        assert!(model.rollout(&w, 2).is_err());
        assert!(model.forward(&w).is_ok());
    }

    #[test]
    fn full_pipeline_gradients_match_finite_differences() {
        use crate::numerics::check::finite_diff_check_multi_with_atol;
        let config = tiny_config(2, 3);
        let model = Forecaster::init(config.clone(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::randn(&[1, 3, 2], 0.4, &mut rng);
        let target = Tensor::randn(&[1, 2, 2], 0.4, &mut rng);
        let params: Vec<Tensor> = model.param_tensors().into_iter().map(|(_, t)| t).collect();
        let n_params = params.len();
        let model2 = model.clone();
        let errs = finite_diff_check_multi_with_atol(
            move |tape, vars| {
                // Bind the perturbed inputs as the model's parameter leaves
                // and run the shared recorded path.
                let (pvars, _) = patched_register(tape, &model2, vars);
                let xv = tape.constant(x.clone());
                let out = model2.forward_on_tape(tape, &pvars, xv);
                let sup = out.slice(1, 0, 2);
                let diff = sup.sub(tape.constant(target.clone()));
                diff.mul(diff).mean_all()
            },
            &params,
            1e-5,
            1e-8,
        );
        assert_eq!(errs.len(), n_params);
        for (i, e) in errs.iter().enumerate() {
            assert!(*e < 1e-6, "param {i}: fd error {e}");
        }
    }

    /// Bind existing vars as the registered parameters (same order as
    /// `register`), so finite differences perturb the actual leaves.
    fn patched_register<'t>(
        _tape: &'t Tape,
        model: &Forecaster,
        vars: &[Var<'t>],
    ) -> (ForecasterVars<'t>, usize) {
        let mut i = 0;
        let mut next = || {
            let v = vars[i];
            i += 1;
            v
        };
        let gat = model.gat.as_ref().map(|_| GatVars {
            weight: next(),
            attn_src: next(),
            attn_dst: next(),
        });
        let embed_w = next();
        let embed_b = next();
        let pos = next();
        let blocks = model
            .decoder
            .blocks
            .iter()
            .map(|_| crate::backbone::DecoderBlockVars::from_vars((0..12).map(|_| next()).collect()))
            .collect();
        let decoder = DecoderVars { blocks, final_gain: next(), final_bias: next() };
        let head_hidden = model.head_hidden_w.as_ref().map(|_| (next(), next()));
        let head_w = next();
        let head_b = next();
        (
            ForecasterVars { gat, embed_w, embed_b, pos, decoder, head_hidden, head_w, head_b },
            i,
        )
    }

    #[test]
    fn nonlinear_head_and_nogat_variants_run() {
        let mut cfg = tiny_config(3, 4);
        cfg.nonlinear_head = true;
        cfg.use_gat = false;
        let model = Forecaster::init(cfg, 15).unwrap();
        let w = random_window(4, 3, 16);
        let out = model.forward(&w).unwrap();
        assert_eq!(out.shape(), &[4, 3]);
        // No GAT parameters registered.
        assert!(model.param_tensors().iter().all(|(n, _)| !n.starts_with("gat.")));
    }
}
