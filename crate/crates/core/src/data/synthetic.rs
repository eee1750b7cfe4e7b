use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::types::BidRecord;

/// Stationary bid log: constant true CTR/CVR, log-normal market prices and
/// noisy predictions around the true rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_records: usize,
    pub ctr_true: f64,
    pub cvr_true: f64,
    /// Mean of `ln(price)`, price in fen.
    pub price_log_mean: f64,
    pub price_log_sigma: f64,
    /// Standard deviation of the relative prediction error.
    pub pctr_noise: f64,
    pub pcvr_noise: f64,
    /// Mean gap between consecutive timestamps in ms.
    pub mean_gap_ms: u32,
    pub start_ts: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_records: 100_000,
            ctr_true: 0.05,
            cvr_true: 0.1,
            price_log_mean: 2.3,
            price_log_sigma: 0.5,
            pctr_noise: 0.2,
            pcvr_noise: 0.2,
            mean_gap_ms: 50,
            start_ts: 1_370_995_200_000,
            seed: 1,
        }
    }
}

const PRED_FLOOR: f64 = 1e-6;

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let open_unit = |p: f64| p > 0.0 && p < 1.0;
        if !open_unit(self.ctr_true) || !open_unit(self.cvr_true) {
            return Err(DataError::Config("ctr_true and cvr_true must be in (0, 1)".into()));
        }
        if !(self.price_log_sigma.is_finite() && self.price_log_sigma >= 0.0) || !self.price_log_mean.is_finite() {
            return Err(DataError::Config("price_log_sigma must be >= 0".into()));
        }
        if !(self.pctr_noise >= 0.0 && self.pcvr_noise >= 0.0) {
            return Err(DataError::Config("prediction noise must be >= 0".into()));
        }
        if self.mean_gap_ms == 0 {
            return Err(DataError::Config("mean_gap_ms must be positive".into()));
        }
        Ok(())
    }
}

/// Deterministic record stream; the whole sequence is a function of the
/// config.
pub struct SyntheticLog {
    config: SynthConfig,
    rng: ChaCha8Rng,
    price: LogNormal<f64>,
    noise: Normal<f64>,
    emitted: usize,
    ts: i64,
}

impl SyntheticLog {
    pub fn new(config: SynthConfig) -> Result<Self, DataError> {
        config.validate()?;
        let price = LogNormal::new(config.price_log_mean, config.price_log_sigma)
            .map_err(|e| DataError::Config(e.to_string()))?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            price,
            noise: Normal::new(0.0, 1.0).expect("unit normal"),
            emitted: 0,
            ts: config.start_ts,
            config,
        })
    }

    fn prediction(&mut self, truth: f64, noise: f64) -> f64 {
        let z = self.noise.sample(&mut self.rng);
        let p = (truth * (1.0 + noise * z)).clamp(PRED_FLOOR, 1.0);
        ((p * 1e6).round() / 1e6).max(PRED_FLOOR)
    }
}

impl Iterator for SyntheticLog {
    type Item = BidRecord;

    fn next(&mut self) -> Option<BidRecord> {
        if self.emitted >= self.config.n_records {
            return None;
        }
        self.emitted += 1;
        let c = &self.config;
        let (ctr, cvr) = (c.ctr_true, c.cvr_true);
        let (ctr_noise, cvr_noise) = (c.pctr_noise, c.pcvr_noise);
        self.ts += i64::from(self.rng.random_range(1..=2 * c.mean_gap_ms));
        let market_price = self.price.sample(&mut self.rng).round() as u64;
        let click = self.rng.random_bool(ctr);
        let converted = self.rng.random_bool(cvr);
        let pctr = self.prediction(ctr, ctr_noise);
        let pcvr = self.prediction(cvr, cvr_noise);
        Some(BidRecord {
            ts: self.ts,
            pctr,
            pcvr,
            market_price,
            click,
            conversion: click && converted,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.config.n_records - self.emitted;
        (left, Some(left))
    }
}

impl ExactSizeIterator for SyntheticLog {}

pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<BidRecord>, DataError> {
    Ok(SyntheticLog::new(config.clone())?.collect())
}
