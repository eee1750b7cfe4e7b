//! Two-layer bid-adjustment controller trained online from KPI feedback.
//!
//! Each period the controller encodes the merged input (KPI targets, their
//! normalized feedback and accumulated rates) into a hidden vector, squashes
//! the decision layer through a logistic to get the bid multiplier `u`, and
//! after observing the period's outcome takes one normalized step along the
//! window-averaged approximated gradient of the KPI/control cost.

mod gradients;
mod matrix;

pub use gradients::{
    adjusted_ecpm, approx_dhdwe, approx_dxdu, build_input, cost_value, input_dim, kpi_error, logistic,
    logistic_slope, normalized_feedback, partial_j1, partial_j2, reference, sigmoid_layer_grads, sign,
    BudgetErrorMode, FeatureSet,
};
pub use matrix::{dot, norm, Matrix};

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sim::{BidController, Decision, Observation, PeriodDiagnostics};
use crate::types::{ConstraintSet, PeriodFeedback};

/// Logit clamp keeping `u` strictly inside `(0, u_max)` in f64.
const LOGIT_LIMIT: f64 = 30.0;
/// Averaged gradients with a smaller Frobenius norm are not applied.
pub const MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmfConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    /// Number of logged periods averaged per update.
    pub window: usize,
    /// Control-term weight `r`.
    pub control_weight: f64,
    /// `u_max`; the multiplier lives in `(0, u_max)`.
    pub output_scale: f64,
    pub feature_set: FeatureSet,
    pub budget_error_mode: BudgetErrorMode,
    /// Encoding weights start uniform in `±encoder_init`.
    pub encoder_init: f64,
    /// Decision weights start uniform in `±decoder_init`. Zero pins the first
    /// output at `u_max / 2` but then no co-movement signal ever appears.
    pub decoder_init: f64,
    pub rng_seed: u64,
}

impl Default for McmfConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 8,
            learning_rate: 0.01,
            window: 4,
            control_weight: 1.0,
            output_scale: 1.0,
            feature_set: FeatureSet::Full,
            budget_error_mode: BudgetErrorMode::PaperLiteral,
            encoder_init: 0.1,
            decoder_init: 0.1,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum McmfError {
    #[error("invalid controller config: {0}")]
    Config(String),
    #[error("input has {got} entries, encoder expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no previous period to difference against")]
    InsufficientHistory,
}

impl McmfConfig {
    pub fn validate(&self) -> Result<(), McmfError> {
        let bad = |m: &str| Err(McmfError::Config(m.to_string()));
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if !(self.control_weight.is_finite() && self.control_weight > 0.0) {
            return bad("control_weight must be positive");
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return bad("output_scale must be positive");
        }
        if !(self.encoder_init.is_finite() && self.encoder_init >= 0.0)
            || !(self.decoder_init.is_finite() && self.decoder_init >= 0.0)
        {
            return bad("init scales must be nonnegative");
        }
        Ok(())
    }
}

/// Weights, the last two forward passes, feedback snapshots and the gradient
/// logs of the last `window` periods.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub w_enc: Matrix,
    pub w_dec: Vec<f64>,
    pub u_curr: f64,
    pub u_prev: f64,
    pub h_curr: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub x_curr: Vec<f64>,
    pub x_prev: Vec<f64>,
    /// Normalized per-period feedback of the latest and the previous period.
    pub fb_curr: Vec<f64>,
    pub fb_prev: Vec<f64>,
    pub grad_log_enc: VecDeque<Matrix>,
    pub grad_log_dec: VecDeque<Vec<f64>>,
    /// Forward passes run so far.
    pub forwards: usize,
    /// Feedback snapshots recorded so far.
    pub observed: usize,
}

/// Result of one backward pass, already appended to the logs.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub chain: f64,
    pub enc: Matrix,
    pub dec: Vec<f64>,
}

/// What `apply_update` did to each weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateReport {
    pub enc_applied: bool,
    pub dec_applied: bool,
}

pub fn init_controller(config: &McmfConfig, input_dim: usize) -> ControllerState {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut draw = |scale: f64| {
        if scale > 0.0 {
            rng.random_range(-scale..scale)
        } else {
            0.0
        }
    };
    let w_enc = Matrix::from_fn(config.hidden_dim, input_dim, |_, _| draw(config.encoder_init));
    let w_dec = (0..config.hidden_dim).map(|_| draw(config.decoder_init)).collect();
    let u0 = config.output_scale / 2.0;
    ControllerState {
        w_enc,
        w_dec,
        u_curr: u0,
        u_prev: u0,
        h_curr: vec![0.0; config.hidden_dim],
        h_prev: vec![0.0; config.hidden_dim],
        x_curr: vec![0.0; input_dim],
        x_prev: vec![0.0; input_dim],
        fb_curr: Vec::new(),
        fb_prev: Vec::new(),
        grad_log_enc: VecDeque::with_capacity(config.window),
        grad_log_dec: VecDeque::with_capacity(config.window),
        forwards: 0,
        observed: 0,
    }
}

impl ControllerState {
    pub fn input_dim(&self) -> usize {
        self.w_enc.cols()
    }

    /// Index of the period the latest forward pass belongs to.
    pub fn period_index(&self) -> Option<usize> {
        self.forwards.checked_sub(1)
    }

    /// `h = W_e x`, `u = u_max σ(W_d h)`; shifts the previous pass into the
    /// `*_prev` slots.
    pub fn forward(&mut self, x: &[f64], u_max: f64) -> Result<(Vec<f64>, f64), McmfError> {
        if x.len() != self.input_dim() {
            return Err(McmfError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let h = self.w_enc.matvec(x);
        let logit = dot(&self.w_dec, &h).clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
        let u = u_max * logistic(logit);
        self.h_prev = std::mem::replace(&mut self.h_curr, h.clone());
        self.x_prev = std::mem::replace(&mut self.x_curr, x.to_vec());
        self.u_prev = self.u_curr;
        self.u_curr = u;
        self.forwards += 1;
        Ok((h, u))
    }

    /// Records the period's normalized feedback, then assembles
    /// `(Σ_i ∂J₁/∂x_i · dx_i/du + ∂J₂/∂u)` and the two weight gradients.
    ///
    /// The feedback snapshot is stored even when there is no previous period
    /// yet; in that case `InsufficientHistory` tells the caller to skip the
    /// update.
    pub fn backward(
        &mut self,
        constraints: &ConstraintSet,
        feedback: &PeriodFeedback,
        elapsed_fraction: f64,
        config: &McmfConfig,
    ) -> Result<Gradients, McmfError> {
        let period_fb = normalized_feedback(constraints, &feedback.period);
        self.fb_prev = std::mem::replace(&mut self.fb_curr, period_fb);
        self.observed += 1;
        if self.forwards < 2 || self.observed < 2 {
            return Err(McmfError::InsufficientHistory);
        }

        let cumulative = normalized_feedback(constraints, &feedback.cumulative);
        let mut chain = partial_j2(config.control_weight, self.u_curr, self.u_prev);
        for (i, c) in constraints.constraints().iter().enumerate() {
            let z = reference(c.kind, elapsed_fraction, config.budget_error_mode);
            let dxdu = approx_dxdu(self.fb_curr[i], self.fb_prev[i], self.u_curr, self.u_prev);
            chain += partial_j1(c.error_weight, cumulative[i], z) * dxdu;
        }

        let (du_dh, du_dwd) = sigmoid_layer_grads(&self.w_dec, &self.h_curr, config.output_scale);
        let dh_dwe = approx_dhdwe(&self.x_curr, &self.h_curr, &self.h_prev, self.u_curr, self.u_prev);
        let mut enc = Matrix::outer(&du_dh, &dh_dwe);
        enc.scale(chain);
        let dec: Vec<f64> = du_dwd.iter().map(|g| chain * g).collect();

        if self.grad_log_enc.len() == config.window {
            self.grad_log_enc.pop_front();
            self.grad_log_dec.pop_front();
        }
        self.grad_log_enc.push_back(enc.clone());
        self.grad_log_dec.push_back(dec.clone());
        Ok(Gradients { chain, enc, dec })
    }

    /// One step of size `η` along each window-averaged, Frobenius-normalized
    /// gradient. Matrices whose averaged gradient vanishes are left alone.
    pub fn apply_update(&mut self, config: &McmfConfig) -> UpdateReport {
        let mut report = UpdateReport::default();
        let n = self.grad_log_enc.len();
        if n == 0 {
            return report;
        }
        let mut mean_enc = Matrix::zeros(self.w_enc.rows(), self.w_enc.cols());
        for g in &self.grad_log_enc {
            mean_enc.add_scaled(1.0 / n as f64, g);
        }
        let enc_norm = mean_enc.frobenius();
        if enc_norm > MIN_GRAD_NORM {
            self.w_enc.add_scaled(-config.learning_rate / enc_norm, &mean_enc);
            report.enc_applied = true;
        }

        let mut mean_dec = vec![0.0; self.w_dec.len()];
        for g in &self.grad_log_dec {
            for (m, v) in mean_dec.iter_mut().zip(g) {
                *m += v / n as f64;
            }
        }
        let dec_norm = norm(&mean_dec);
        if dec_norm > MIN_GRAD_NORM {
            for (w, g) in self.w_dec.iter_mut().zip(&mean_dec) {
                *w -= config.learning_rate * g / dec_norm;
            }
            report.dec_applied = true;
        }
        report
    }
}

/// The controller wired to the replay loop.
#[derive(Debug, Clone)]
pub struct McmfController {
    config: McmfConfig,
    state: ControllerState,
    last_update: UpdateReport,
}

impl McmfController {
    pub fn new(config: McmfConfig, constraints: &ConstraintSet) -> Result<Self, McmfError> {
        config.validate()?;
        let state = init_controller(&config, input_dim(constraints, config.feature_set));
        Ok(Self {
            config,
            state,
            last_update: UpdateReport::default(),
        })
    }

    pub fn config(&self) -> &McmfConfig {
        &self.config
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    /// Which matrices the most recent period's update touched.
    pub fn last_update(&self) -> UpdateReport {
        self.last_update
    }
}

impl BidController for McmfController {
    fn name(&self) -> &str {
        "mcmf"
    }

    fn decide(&mut self, d: &Decision<'_>) -> f64 {
        let x = build_input(d.constraints, d.cumulative, self.config.feature_set);
        let (_, u) = self
            .state
            .forward(&x, self.config.output_scale)
            .expect("input dimension is fixed by the constraint set");
        u
    }

    fn observe(&mut self, o: &Observation<'_>) -> PeriodDiagnostics {
        let error = kpi_error(
            o.constraints,
            &o.feedback.cumulative,
            o.elapsed_fraction,
            self.config.budget_error_mode,
        );
        let q: Vec<f64> = o.constraints.constraints().iter().map(|c| c.error_weight).collect();
        let du = self.state.u_curr - self.state.u_prev;
        let cost = cost_value(&error, &q, &[du], &[self.config.control_weight]);

        self.last_update = match self
            .state
            .backward(o.constraints, o.feedback, o.elapsed_fraction, &self.config)
        {
            Ok(_) => self.state.apply_update(&self.config),
            Err(McmfError::InsufficientHistory) => UpdateReport::default(),
            Err(e) => panic!("backward failed: {e}"),
        };
        PeriodDiagnostics { error, cost }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Counters;

    fn cfg() -> McmfConfig {
        McmfConfig {
            hidden_dim: 2,
            ..McmfConfig::default()
        }
    }

    fn bare_state(w_enc: Matrix, w_dec: Vec<f64>) -> ControllerState {
        let mut s = init_controller(&McmfConfig::default(), w_enc.cols());
        s.h_curr = vec![0.0; w_enc.rows()];
        s.h_prev = vec![0.0; w_enc.rows()];
        s.w_enc = w_enc;
        s.w_dec = w_dec;
        s
    }

    #[test]
    fn forward_examples() {
        let mut s = bare_state(Matrix::identity(2), vec![0.0, 0.0]);
        let (h, u) = s.forward(&[1.0, 1.0], 1.0).unwrap();
        assert_eq!(h, vec![1.0, 1.0]);
        assert_eq!(u, 0.5);

        let mut s = bare_state(Matrix::identity(2), vec![1.0, 0.0]);
        let (_, u) = s.forward(&[1.0, 0.0], 1.0).unwrap();
        assert!((u - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(s.u_prev, 0.5);

        assert_eq!(
            s.forward(&[1.0], 1.0),
            Err(McmfError::DimensionMismatch { expected: 2, got: 1 })
        );
    }

    #[test]
    fn forward_stays_in_range_when_saturated() {
        let mut s = bare_state(Matrix::identity(1), vec![1e6]);
        let (_, hi) = s.forward(&[1.0], 2.0).unwrap();
        let (_, lo) = s.forward(&[-1.0], 2.0).unwrap();
        assert!(hi < 2.0 && hi > 0.0);
        assert!(lo > 0.0 && lo < 2.0);
    }

    #[test]
    fn forward_matches_naive_loops() {
        let config = McmfConfig {
            hidden_dim: 4,
            decoder_init: 0.5,
            encoder_init: 0.5,
            rng_seed: 42,
            ..McmfConfig::default()
        };
        let mut s = init_controller(&config, 6);
        let x = [0.3, -1.2, 0.7, 2.0, 0.0, 1.1];
        let mut h = [0.0; 4];
        for (r, hr) in h.iter_mut().enumerate() {
            for (c, xc) in x.iter().enumerate() {
                *hr += s.w_enc.get(r, c) * xc;
            }
        }
        let a: f64 = s.w_dec.iter().zip(&h).map(|(w, v)| w * v).sum();
        let expect = 1.0 / (1.0 + (-a).exp());
        let (got_h, u) = s.forward(&x, 1.0).unwrap();
        for k in 0..4 {
            assert!((got_h[k] - h[k]).abs() < 1e-12);
        }
        assert!((u - expect).abs() < 1e-12);
    }

    #[test]
    fn init_is_seeded() {
        let config = McmfConfig {
            rng_seed: 9,
            ..McmfConfig::default()
        };
        let a = init_controller(&config, 8);
        let b = init_controller(&config, 8);
        assert_eq!(a, b);
        assert_eq!((a.w_enc.rows(), a.w_enc.cols()), (8, 8));
        assert!(a.w_enc.as_slice().iter().all(|w| w.abs() < 0.1));
        let c = init_controller(&McmfConfig { rng_seed: 10, ..config }, 8);
        assert_ne!(a.w_enc, c.w_enc);
    }

    #[test]
    fn zero_decoder_init_starts_at_half_scale() {
        let config = McmfConfig {
            decoder_init: 0.0,
            output_scale: 3.0,
            ..McmfConfig::default()
        };
        let mut s = init_controller(&config, 8);
        let (_, u) = s.forward(&[5.0, -1.0, 2.0, 0.0, 1.0, 1.0, 1.0, 9.0], 3.0).unwrap();
        assert_eq!(u, 1.5);
    }

    fn feedback(period_cost: u64, cum_cost: u64, conv: u64) -> PeriodFeedback {
        PeriodFeedback {
            period: Counters {
                cost: period_cost,
                ..Counters::default()
            },
            cumulative: Counters {
                cost: cum_cost,
                conversions: conv,
                ..Counters::default()
            },
        }
    }

    #[test]
    fn backward_needs_history() {
        let cs = ConstraintSet::single(1800.0, 1.0).unwrap();
        let config = cfg();
        let mut s = init_controller(&config, 2);
        s.forward(&[1.0, 0.0], 1.0).unwrap();
        assert_eq!(
            s.backward(&cs, &feedback(10, 10, 0), 0.1, &config),
            Err(McmfError::InsufficientHistory)
        );
        assert_eq!(s.fb_curr.len(), 1);
        s.forward(&[1.0, 0.1], 1.0).unwrap();
        assert!(s.backward(&cs, &feedback(10, 20, 0), 0.2, &config).is_ok());
        assert_eq!(s.grad_log_enc.len(), 1);
    }

    #[test]
    fn backward_stationary_point_is_zero() {
        let cs = ConstraintSet::single(1800.0, 1.0).unwrap();
        let config = cfg();
        let mut s = init_controller(&config, 2);
        // cumulative PPC exactly on target and u unchanged
        s.forward(&[1.0, 1.0], 1.0).unwrap();
        s.backward(&cs, &feedback(1800, 1800, 1), 0.5, &config).unwrap_err();
        s.forward(&[1.0, 1.0], 1.0).unwrap();
        let g = s.backward(&cs, &feedback(1800, 3600, 2), 0.5, &config).unwrap();
        assert_eq!(g.chain, 0.0);
        assert!(g.enc.as_slice().iter().all(|v| *v == 0.0));
        assert!(g.dec.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ring_buffer_is_bounded() {
        let cs = ConstraintSet::single(1800.0, 1.0).unwrap();
        let config = McmfConfig { window: 3, ..cfg() };
        let mut s = init_controller(&config, 2);
        for t in 0..10u64 {
            s.forward(&[1.0, t as f64 * 0.1], 1.0).unwrap();
            let _ = s.backward(&cs, &feedback(t * 7 % 5, t * 10, 0), 0.1, &config);
            assert!(s.grad_log_enc.len() <= 3 && s.grad_log_dec.len() <= 3);
        }
        assert_eq!(s.grad_log_enc.len(), 3);
    }

    #[test]
    fn update_rules() {
        let config = cfg();
        let mut s = init_controller(&config, 2);
        let before = s.clone();
        assert_eq!(s.apply_update(&config), UpdateReport::default());

        s.grad_log_enc.push_back(Matrix::zeros(2, 2));
        s.grad_log_dec.push_back(vec![0.0, 0.0]);
        assert_eq!(s.apply_update(&config), UpdateReport::default());
        assert_eq!(s.w_enc, before.w_enc);

        s.grad_log_enc.clear();
        s.grad_log_dec.clear();
        let g = Matrix::from_rows(&[vec![3.0, -1.0], vec![0.5, 2.0]]);
        s.grad_log_enc.push_back(g.clone());
        s.grad_log_dec.push_back(vec![0.2, -0.7]);
        let r = s.apply_update(&config);
        assert!(r.enc_applied && r.dec_applied);
        let mut delta = s.w_enc.clone();
        delta.add_scaled(-1.0, &before.w_enc);
        assert!((delta.frobenius() - 0.01).abs() < 1e-9);
        let dd: Vec<f64> = s.w_dec.iter().zip(&before.w_dec).map(|(a, b)| a - b).collect();
        assert!((norm(&dd) - 0.01).abs() < 1e-9);

        // G and -G cancel
        let mut s = before.clone();
        let config2 = McmfConfig { window: 2, ..cfg() };
        let mut neg = g.clone();
        neg.scale(-1.0);
        s.grad_log_enc.extend([g, neg]);
        s.grad_log_dec.extend([vec![1.0, 1.0], vec![-1.0, -1.0]]);
        assert_eq!(s.apply_update(&config2), UpdateReport::default());
        assert_eq!(s.w_enc, before.w_enc);
    }

    #[test]
    fn config_validation() {
        assert!(McmfConfig::default().validate().is_ok());
        for bad in [
            McmfConfig { hidden_dim: 0, ..McmfConfig::default() },
            McmfConfig { window: 0, ..McmfConfig::default() },
            McmfConfig { learning_rate: 0.0, ..McmfConfig::default() },
            McmfConfig { output_scale: -1.0, ..McmfConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
