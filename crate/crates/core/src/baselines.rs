//! Reference controllers sharing the replay interface with the MCMF
//! controller.

use serde::{Deserialize, Serialize};

use crate::mcmf::{cost_value, kpi_error, BudgetErrorMode};
use crate::sim::{BidController, Decision, Observation, PeriodDiagnostics};
use crate::types::{feedback_value, ConstraintKind, ConstraintSet, Counters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub u_init: f64,
    /// The error integral is held within `±integral_clamp`.
    pub integral_clamp: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            kp: 0.2,
            ki: 0.05,
            kd: 0.05,
            u_min: 0.01,
            u_max: 1.0,
            u_init: 0.5,
            integral_clamp: 5.0,
        }
    }
}

impl PidConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.u_min > 0.0 && self.u_min < self.u_max && self.u_max.is_finite()) {
            return Err(format!("need 0 < u_min < u_max, got {} / {}", self.u_min, self.u_max));
        }
        if [self.kp, self.ki, self.kd].iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err("PID gains must be nonnegative".into());
        }
        if !(self.u_init.is_finite() && self.u_init > 0.0) {
            return Err("u_init must be positive".into());
        }
        if !(self.integral_clamp.is_finite() && self.integral_clamp >= 0.0) {
            return Err("integral_clamp must be nonnegative".into());
        }
        Ok(())
    }
}

/// PID on the normalized error with an exponential actuator:
/// `u = clamp(u_init · e^(−φ))`, so being under target raises the bid.
#[derive(Debug, Clone, PartialEq)]
pub struct PidState {
    config: PidConfig,
    integral: f64,
    prev_error: Option<f64>,
}

impl PidState {
    pub fn new(config: PidConfig) -> Self {
        Self {
            config,
            integral: 0.0,
            prev_error: None,
        }
    }

    pub fn integral(&self) -> f64 {
        self.integral
    }

    pub fn step(&mut self, error: f64) -> f64 {
        let c = &self.config;
        self.integral = (self.integral + error).clamp(-c.integral_clamp, c.integral_clamp);
        let derivative = error - self.prev_error.unwrap_or(0.0);
        self.prev_error = Some(error);
        let phi = c.kp * error + c.ki * self.integral + c.kd * derivative;
        (c.u_init * (-phi).exp()).clamp(c.u_min, c.u_max)
    }
}

/// Normalized PPC error, the signal the PID tracks. The budget only acts
/// through termination. Without a PPC constraint the first constraint is used.
fn tracked_error(constraints: &ConstraintSet, cumulative: &Counters) -> f64 {
    let c = constraints
        .get(ConstraintKind::PpcTarget)
        .or_else(|| constraints.constraints().first());
    c.map_or(0.0, |c| feedback_value(c, cumulative) / c.target - 1.0)
}

/// Error vector and cost in the same units the MCMF controller reports, with
/// a unit control weight.
fn diagnostics(o: &Observation<'_>, du: f64) -> PeriodDiagnostics {
    let error = kpi_error(
        o.constraints,
        &o.feedback.cumulative,
        o.elapsed_fraction,
        BudgetErrorMode::PaperLiteral,
    );
    let q: Vec<f64> = o.constraints.constraints().iter().map(|c| c.error_weight).collect();
    let cost = cost_value(&error, &q, &[du], &[1.0]);
    PeriodDiagnostics { error, cost }
}

#[derive(Debug, Clone)]
pub struct PidController {
    pid: PidState,
    u: f64,
    u_prev: f64,
}

impl PidController {
    pub fn new(config: PidConfig) -> Self {
        let u = config.u_init.clamp(config.u_min, config.u_max);
        Self {
            pid: PidState::new(config),
            u,
            u_prev: u,
        }
    }
}

impl BidController for PidController {
    fn name(&self) -> &str {
        "pid"
    }

    fn decide(&mut self, d: &Decision<'_>) -> f64 {
        self.u_prev = self.u;
        if d.period > 0 {
            self.u = self.pid.step(tracked_error(d.constraints, d.cumulative));
        }
        self.u
    }

    fn observe(&mut self, o: &Observation<'_>) -> PeriodDiagnostics {
        diagnostics(o, self.u - self.u_prev)
    }
}

/// Constant multiplier, no feedback.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedController {
    u: f64,
}

impl FixedController {
    pub fn new(u: f64) -> Self {
        assert!(u > 0.0, "fixed multiplier must be positive");
        Self { u }
    }
}

impl BidController for FixedController {
    fn name(&self) -> &str {
        "fixed"
    }

    fn decide(&mut self, _: &Decision<'_>) -> f64 {
        self.u
    }

    fn observe(&mut self, o: &Observation<'_>) -> PeriodDiagnostics {
        diagnostics(o, 0.0)
    }
}
