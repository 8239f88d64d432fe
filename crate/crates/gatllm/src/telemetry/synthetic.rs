//! Synthetic cross-layer telemetry with the couplings the real feed exhibits:
//! channel quality drives MCS, MCS x load drives MAC throughput, throughput
//! drains the PDCP queue.

use super::{canonical_schema, TelemetrySeries};
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Generator parameters. All scales are non-negative; `sinr_rho` is the lag-1
/// persistence of the SINR process.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub length: usize,
    pub seed: u64,
    pub missing_prob: f64,
    pub sinr_mean: f64,
    pub sinr_rho: f64,
    pub sinr_noise: f64,
    pub prb_noise: f64,
    pub rate_noise: f64,
    pub cell_load_scale: f64,
    pub bw_noise: f64,
    pub buffer_capacity: f64,
    pub arrival_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            length: 20_000,
            seed: 0,
            missing_prob: 0.0,
            sinr_mean: 15.0,
            sinr_rho: 0.9,
            sinr_noise: 1.0,
            prb_noise: 3.0,
            rate_noise: 2_000.0,
            cell_load_scale: 50_000.0,
            bw_noise: 0.01,
            buffer_capacity: 1.0e6,
            arrival_rate: 60_000.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Config("synthetic length must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.missing_prob) {
            return Err(Error::Config(format!("missing_prob must be in [0,1), got {}", self.missing_prob)));
        }
        if !(self.sinr_rho > 0.0 && self.sinr_rho < 1.0) {
            return Err(Error::Config(format!("sinr_rho must be in (0,1), got {}", self.sinr_rho)));
        }
        for (name, v) in [
            ("sinr_noise", self.sinr_noise),
            ("prb_noise", self.prb_noise),
            ("rate_noise", self.rate_noise),
            ("cell_load_scale", self.cell_load_scale),
            ("bw_noise", self.bw_noise),
            ("buffer_capacity", self.buffer_capacity),
            ("arrival_rate", self.arrival_rate),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Generate a reproducible correlated series over the canonical nine columns.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<TelemetrySeries> {
    cfg.validate()?;
    let schema = canonical_schema();
    let n = schema.len();
    let t_len = cfg.length;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let mut values = vec![0.0; t_len * n];

    // State variables.
    let mut sinr = cfg.sinr_mean;
    let mut prb = 50.0;
    let mut cell_load = cfg.cell_load_scale;
    let mut bw = 2.0e7;
    let mut queue = cfg.buffer_capacity * 0.25;

    for t in 0..t_len {
        // ULSINR: first-order Gauss-Markov around the mean.
        sinr = cfg.sinr_mean + cfg.sinr_rho * (sinr - cfg.sinr_mean) + cfg.sinr_noise * normal(&mut rng);

        // MCS: clipped quantization of the channel quality.
        let mcs = (1.4 * (sinr - cfg.sinr_mean) + 14.0).round().clamp(0.0, 28.0);

        // DLOccupyPRBNum: mean-reverting bounded load.
        prb = (prb + 0.05 * (50.0 - prb) + cfg.prb_noise * normal(&mut rng)).clamp(0.0, 100.0);

        // DLMACRate: noisy monotone function of MCS x PRB occupancy.
        let dlmac = (1_000.0 * (mcs + 1.0) * prb + cfg.rate_noise * normal(&mut rng)).max(0.0);

        // CellDLMACRate: user rate plus an independent positive cell-load term.
        cell_load = (cfg.cell_load_scale + 0.95 * (cell_load - cfg.cell_load_scale)
            + 0.1 * cfg.cell_load_scale * normal(&mut rng))
        .max(0.0);
        let cell_rate = dlmac + cell_load;

        // PDCP queue: arrivals minus service, clamped to capacity.
        let arrivals = (cfg.arrival_rate * (1.0 + 0.5 * normal(&mut rng))).max(0.0);
        let service_capacity = dlmac;
        let served = (queue + arrivals).min(service_capacity);
        queue = (queue + arrivals - served).clamp(0.0, cfg.buffer_capacity);
        let unused = cfg.buffer_capacity - queue;
        let sdu_num = (served / 1_000.0).floor();

        // DLBw: slowly varying positive process.
        bw = (2.0e7 + 0.999 * (bw - 2.0e7) + cfg.bw_noise * 2.0e7 * normal(&mut rng)).max(1.0e6);

        let row = &mut values[t * n..(t + 1) * n];
        row[0] = bw;
        row[1] = sinr;
        row[2] = prb;
        row[3] = cell_rate;
        row[4] = dlmac;
        row[5] = mcs;
        row[6] = queue;
        row[7] = unused;
        row[8] = sdu_num;
    }

    // Missing cells drawn after the trajectory so the dynamics never depend
    // on the mask.
    let mut missing = vec![false; t_len * n];
    if cfg.missing_prob > 0.0 {
        for m in missing.iter_mut() {
            *m = rng.random::<f64>() < cfg.missing_prob;
        }
    }

    TelemetrySeries::new(schema, values, missing)
}
