//! Multivariate wireless link-quality forecasting.
//!
//! A graph-attention layer embeds the cross-variable structure of per-slot
//! telemetry (PHY/MAC/PDCP counters), a decoder-only transformer models the
//! temporal structure, and an autoregressive rollout produces multi-step
//! forecasts. Statistical and ablation baselines plus an evaluation harness
//! round out the toolkit.

pub mod backbone;
pub mod baselines;
pub mod error;
pub mod eval;
pub mod forecaster;
pub mod gat;
pub mod numerics;
pub mod telemetry;

pub use error::{Error, Result};
