//! Teacher-forced training: every window position predicts the next row's
//! target columns, so a length-tau window supervises tau-1 positions.

use super::Forecaster;
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::numerics::{AdamState, Tape};
use crate::telemetry::WindowedDataset;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop after this many epochs without improvement (validation loss when
    /// a validation set is supplied, else training loss). None = run all
    /// epochs.
    pub patience: Option<usize>,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 50,
            learning_rate: 1e-3,
            seed: 0,
            patience: None,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Copy a set of windows into a batch tensor plus its teacher-forcing targets
/// (window rows 1..tau, target columns only).
fn assemble_batch(
    data: &WindowedDataset,
    indices: &[usize],
    target_columns: &[usize],
) -> (Tensor, Tensor) {
    let (tau, n, m) = (data.window_len, data.cols, target_columns.len());
    let b = indices.len();
    let mut x = Vec::with_capacity(b * tau * n);
    let mut y = Vec::with_capacity(b * (tau - 1) * m);
    for &i in indices {
        let w = &data.inputs[i];
        x.extend_from_slice(w);
        for t in 1..tau {
            for &c in target_columns {
                y.push(w[t * n + c]);
            }
        }
    }
    (
        Tensor::new(vec![b, tau, n], x).expect("window sizes agree"),
        Tensor::new(vec![b, tau - 1, m], y).expect("target sizes agree"),
    )
}

/// Mean squared error of a model over a dataset, evaluated in inference mode
/// batch by batch (used for validation-based early stopping).
pub fn dataset_loss(model: &Forecaster, data: &WindowedDataset, batch_size: usize) -> Result<f64> {
    let tau = data.window_len;
    let m = model.config.output_dim;
    let mut total = 0.0;
    let mut count = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size) {
        let (x, y) = assemble_batch(data, chunk, &model.config.target_columns);
        let preds = model.forward_batch(&x)?;
        let b = chunk.len();
        let mut se = 0.0;
        for i in 0..b {
            for t in 0..tau - 1 {
                for j in 0..m {
                    let p = preds.at(&[i, t, j]);
                    let a = y.at(&[i, t, j]);
                    se += (p - a) * (p - a);
                }
            }
        }
        total += se;
        count += b * (tau - 1) * m;
    }
    Ok(total / count as f64)
}

/// Train in place; returns the per-epoch mean training loss.
pub fn train(model: &mut Forecaster, data: &WindowedDataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    train_with_validation(model, data, None, cfg)
}

pub fn train_with_validation(
    model: &mut Forecaster,
    data: &WindowedDataset,
    validation: Option<&WindowedDataset>,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if data.window_len != model.config.window_len || data.cols != model.config.n_variables {
        return Err(Error::Shape {
            op: "train",
            detail: format!(
                "dataset windows [{}, {}] vs model [{}, {}]",
                data.window_len, data.cols, model.config.window_len, model.config.n_variables
            ),
        });
    }

    let mut adam = {
        let shapes: Vec<&Tensor> = model.params_mut().into_iter().map(|t| &*t).collect();
        AdamState::new(cfg.learning_rate, &shapes)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut weighted_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = assemble_batch(data, chunk, &model.config.target_columns);
            let tape = Tape::new();
            let (vars, flat) = model.register(&tape);
            let xv = tape.constant(x);
            let preds = model.forward_on_tape(&tape, &vars, xv);
            let supervised = preds.slice(1, 0, data.window_len - 1);
            let diff = supervised.sub(tape.constant(y));
            let loss = diff.mul(diff).mean_all();
            let loss_value = loss.value().item();
            if !loss_value.is_finite() {
                return Err(Error::Diverged { epoch, loss: loss_value });
            }
            weighted_loss += loss_value * chunk.len() as f64;

            let mut grads = tape.backward(loss)?;
            let mut grad_list: Vec<Tensor> = flat.iter().map(|v| grads.take(*v)).collect();
            if let Some(clip) = cfg.clip_norm {
                clip_global_norm(&mut grad_list, clip);
            }
            adam.step(&mut model.params_mut(), &grad_list)?;
        }
        history.push(weighted_loss / data.len() as f64);

        let monitored = match validation {
            Some(val) => dataset_loss(model, val, cfg.batch_size)?,
            None => *history.last().expect("just pushed"),
        };
        if let Some(patience) = cfg.patience {
            if monitored < best {
                best = monitored;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok(history)
}

fn clip_global_norm(grads: &mut [Tensor], clip: f64) {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        let s = clip / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
}
