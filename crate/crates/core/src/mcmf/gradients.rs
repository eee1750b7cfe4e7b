//! Closed-form pieces of the controller: merged input features, the
//! quadratic KPI/control cost and the approximated gradient factors.

use serde::{Deserialize, Serialize};

use crate::types::{feedback_value, BidRecord, ConstraintKind, ConstraintSet, Counters};

/// Which accumulated rates are appended to the KPI part of the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FeatureSet {
    /// No extra features.
    Ng,
    /// Posterior rates: CTR, CVR.
    Po,
    /// Prior rates: mean pCTR, mean pCVR.
    Pi,
    #[default]
    Full,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 4] = [FeatureSet::Ng, FeatureSet::Po, FeatureSet::Pi, FeatureSet::Full];

    pub fn extra_dim(self) -> usize {
        match self {
            FeatureSet::Ng => 0,
            FeatureSet::Po | FeatureSet::Pi => 2,
            FeatureSet::Full => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSet::Ng => "NG",
            FeatureSet::Po => "PO",
            FeatureSet::Pi => "PI",
            FeatureSet::Full => "FULL",
        }
    }
}

/// Reference the budget error is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetErrorMode {
    /// Cumulative spend against the whole budget.
    #[default]
    PaperLiteral,
    /// Cumulative spend against the elapsed share of the budget.
    Paced,
}

pub fn input_dim(constraints: &ConstraintSet, feature_set: FeatureSet) -> usize {
    2 * constraints.len() + feature_set.extra_dim()
}

/// Target-normalized feedback `x / z` for every constraint.
pub fn normalized_feedback(constraints: &ConstraintSet, counters: &Counters) -> Vec<f64> {
    constraints
        .constraints()
        .iter()
        .map(|c| feedback_value(c, counters) / c.target)
        .collect()
}

/// `[1, x̂_1, …, 1, x̂_n, v]` with `v` selected by `feature_set`.
pub fn build_input(constraints: &ConstraintSet, cumulative: &Counters, feature_set: FeatureSet) -> Vec<f64> {
    let mut x = Vec::with_capacity(input_dim(constraints, feature_set));
    for fb in normalized_feedback(constraints, cumulative) {
        x.push(1.0);
        x.push(fb);
    }
    let posterior = [cumulative.ctr(), cumulative.cvr()];
    let prior = [cumulative.mean_pctr(), cumulative.mean_pcvr()];
    match feature_set {
        FeatureSet::Ng => {}
        FeatureSet::Po => x.extend(posterior),
        FeatureSet::Pi => x.extend(prior),
        FeatureSet::Full => {
            x.extend(posterior);
            x.extend(prior);
        }
    }
    x
}

/// Bid in CPM fen: `1000 · pCTR · pCVR · PPC_e · u`.
pub fn adjusted_ecpm(record: &BidRecord, ppc_expected: f64, u: f64) -> f64 {
    1000.0 * record.pctr * record.pcvr * ppc_expected * u
}

/// Normalized KPI error vector, one entry per constraint.
pub fn kpi_error(
    constraints: &ConstraintSet,
    cumulative: &Counters,
    elapsed_fraction: f64,
    mode: BudgetErrorMode,
) -> Vec<f64> {
    constraints
        .constraints()
        .iter()
        .zip(normalized_feedback(constraints, cumulative))
        .map(|(c, x)| x - reference(c.kind, elapsed_fraction, mode))
        .collect()
}

/// Normalized target a constraint's feedback is compared to.
pub fn reference(kind: ConstraintKind, elapsed_fraction: f64, mode: BudgetErrorMode) -> f64 {
    match (kind, mode) {
        (ConstraintKind::Budget, BudgetErrorMode::Paced) => elapsed_fraction.clamp(0.0, 1.0),
        _ => 1.0,
    }
}

/// `EᵀQE + ΔUᵀRΔU` for diagonal `Q` and `R`.
pub fn cost_value(error: &[f64], q: &[f64], delta_u: &[f64], r: &[f64]) -> f64 {
    assert_eq!(error.len(), q.len());
    assert_eq!(delta_u.len(), r.len());
    let quad = |v: &[f64], w: &[f64]| v.iter().zip(w).map(|(a, b)| b * a * a).sum::<f64>();
    quad(error, q) + quad(delta_u, r)
}

/// ∂J₁/∂x = 2q(x − z)
pub fn partial_j1(q: f64, x: f64, z: f64) -> f64 {
    2.0 * q * (x - z)
}

/// ∂J₂/∂u = 2r(u⁽ᵗ⁾ − u⁽ᵗ⁻¹⁾), the previous value held constant.
pub fn partial_j2(r: f64, u_curr: f64, u_prev: f64) -> f64 {
    2.0 * r * (u_curr - u_prev)
}

/// Sign with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sign surrogate for the unknown exchange response dx/du.
pub fn approx_dxdu(x_curr: f64, x_prev: f64, u_curr: f64, u_prev: f64) -> f64 {
    sign((x_curr - x_prev) * (u_curr - u_prev))
}

/// Logistic slope `e^(−a) / (1 + e^(−a))²`, evaluated without overflow.
pub fn logistic_slope(a: f64) -> f64 {
    let e = (-a.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

pub fn logistic(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Returns `(du/dh, du/dW_d)` for `u = u_max · σ(W_d · h)`.
pub fn sigmoid_layer_grads(w_dec: &[f64], h: &[f64], u_max: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(w_dec.len(), h.len());
    let a = super::matrix::dot(w_dec, h);
    let s = u_max * logistic_slope(a);
    (w_dec.iter().map(|w| s * w).collect(), h.iter().map(|v| s * v).collect())
}

/// Hebbian surrogate for dh/dW_e: the input scaled by the summed co-movement
/// signs of each hidden unit with the output.
pub fn approx_dhdwe(x: &[f64], h_curr: &[f64], h_prev: &[f64], u_curr: f64, u_prev: f64) -> Vec<f64> {
    assert_eq!(h_curr.len(), h_prev.len());
    let du = u_curr - u_prev;
    let k: f64 = h_curr.iter().zip(h_prev).map(|(c, p)| sign((c - p) * du)).sum();
    x.iter().map(|v| v * k).collect()
}
