//! Domain values shared by the controllers, the auction replay and the harness.
//!
//! Money is carried as integer fen wherever it is accounted (market prices,
//! spend, budgets). Controller-facing quantities such as normalized feedback
//! are plain `f64`.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Money in fen (1/100 CNY).
pub type Fen = u64;

/// One replayable auction opportunity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BidRecord {
    /// Milliseconds since epoch.
    pub ts: i64,
    pub pctr: f64,
    pub pcvr: f64,
    /// Price a bid has to beat, CPM-scale fen. Also what a win pays.
    pub market_price: Fen,
    pub click: bool,
    pub conversion: bool,
}

/// Why a record fails validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordViolation {
    PctrOutOfRange,
    PcvrOutOfRange,
    ConversionWithoutClick,
}

impl fmt::Display for RecordViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordViolation::PctrOutOfRange => f.write_str("pctr outside [0, 1]"),
            RecordViolation::PcvrOutOfRange => f.write_str("pcvr outside [0, 1]"),
            RecordViolation::ConversionWithoutClick => f.write_str("conversion without click"),
        }
    }
}

impl BidRecord {
    pub fn validate(&self) -> Result<(), RecordViolation> {
        if !(0.0..=1.0).contains(&self.pctr) {
            return Err(RecordViolation::PctrOutOfRange);
        }
        if !(0.0..=1.0).contains(&self.pcvr) {
            return Err(RecordViolation::PcvrOutOfRange);
        }
        if self.conversion && !self.click {
            return Err(RecordViolation::ConversionWithoutClick);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    PpcTarget,
    Budget,
}

impl ConstraintKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintKind::PpcTarget => "ppc",
            ConstraintKind::Budget => "budget",
        }
    }
}

/// A KPI target together with the weight of its squared tracking error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpiConstraint {
    pub kind: ConstraintKind,
    /// Target value in fen.
    pub target: f64,
    /// Diagonal entry of the error weighting.
    pub error_weight: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConstraintError {
    #[error("constraint target must be positive and finite, got {0}")]
    BadTarget(f64),
    #[error("constraint error weight must be positive and finite, got {0}")]
    BadWeight(f64),
    #[error("expected PPC must be positive and finite, got {0}")]
    BadExpectedPpc(f64),
    #[error("duplicate {0} constraint")]
    Duplicate(&'static str),
}

impl KpiConstraint {
    pub fn new(kind: ConstraintKind, target: f64, error_weight: f64) -> Result<Self, ConstraintError> {
        if !(target.is_finite() && target > 0.0) {
            return Err(ConstraintError::BadTarget(target));
        }
        if !(error_weight.is_finite() && error_weight > 0.0) {
            return Err(ConstraintError::BadWeight(error_weight));
        }
        Ok(Self {
            kind,
            target,
            error_weight,
        })
    }
}

/// The ordered KPI list plus the expected pay-per-conversion that prices bids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    constraints: Vec<KpiConstraint>,
    ppc_expected: f64,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<KpiConstraint>, ppc_expected: f64) -> Result<Self, ConstraintError> {
        if !(ppc_expected.is_finite() && ppc_expected > 0.0) {
            return Err(ConstraintError::BadExpectedPpc(ppc_expected));
        }
        for kind in [ConstraintKind::PpcTarget, ConstraintKind::Budget] {
            if constraints.iter().filter(|c| c.kind == kind).count() > 1 {
                return Err(ConstraintError::Duplicate(kind.as_str()));
            }
        }
        Ok(Self {
            constraints,
            ppc_expected,
        })
    }

    /// PPC target only, the target being the expected PPC.
    pub fn single(ppc_expected: f64, q_ppc: f64) -> Result<Self, ConstraintError> {
        Self::new(
            vec![KpiConstraint::new(ConstraintKind::PpcTarget, ppc_expected, q_ppc)?],
            ppc_expected,
        )
    }

    /// PPC target followed by a budget target.
    pub fn multi(ppc_expected: f64, budget: Fen, q_ppc: f64, q_budget: f64) -> Result<Self, ConstraintError> {
        Self::new(
            vec![
                KpiConstraint::new(ConstraintKind::PpcTarget, ppc_expected, q_ppc)?,
                KpiConstraint::new(ConstraintKind::Budget, budget as f64, q_budget)?,
            ],
            ppc_expected,
        )
    }

    pub fn constraints(&self) -> &[KpiConstraint] {
        &self.constraints
    }

    pub fn ppc_expected(&self) -> f64 {
        self.ppc_expected
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn get(&self, kind: ConstraintKind) -> Option<&KpiConstraint> {
        self.constraints.iter().find(|c| c.kind == kind)
    }
}

/// Auction counters, either for one period or accumulated over a campaign.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub bids_participated: u64,
    pub impressions: u64,
    pub clicks: u64,
    pub conversions: u64,
    pub cost: Fen,
    pub sum_pctr: f64,
    pub sum_pcvr: f64,
}

impl Counters {
    pub fn accumulate(&mut self, other: &Counters) {
        self.bids_participated += other.bids_participated;
        self.impressions += other.impressions;
        self.clicks += other.clicks;
        self.conversions += other.conversions;
        self.cost += other.cost;
        self.sum_pctr += other.sum_pctr;
        self.sum_pcvr += other.sum_pcvr;
    }

    /// Clicks per impression, 0 without impressions.
    pub fn ctr(&self) -> f64 {
        ratio(self.clicks as f64, self.impressions as f64)
    }

    /// Conversions per click, 0 without clicks.
    pub fn cvr(&self) -> f64 {
        ratio(self.conversions as f64, self.clicks as f64)
    }

    pub fn mean_pctr(&self) -> f64 {
        ratio(self.sum_pctr, self.bids_participated as f64)
    }

    pub fn mean_pcvr(&self) -> f64 {
        ratio(self.sum_pcvr, self.bids_participated as f64)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Feedback after one period: what happened in it and the running totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PeriodFeedback {
    pub period: Counters,
    pub cumulative: Counters,
}

/// IMP / CLK / CONV / cost / PPC rollup of a campaign.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignMetrics {
    pub imp: u64,
    pub clk: u64,
    pub conv: u64,
    pub cost: Fen,
    pub ppc: Option<f64>,
    /// Cumulative (conversions, cost) after each period.
    pub trajectory: Vec<(u64, Fen)>,
}

pub fn compute_metrics(cumulative: &Counters) -> CampaignMetrics {
    let ppc = (cumulative.conversions > 0).then(|| cumulative.cost as f64 / cumulative.conversions as f64);
    CampaignMetrics {
        imp: cumulative.impressions,
        clk: cumulative.clicks,
        conv: cumulative.conversions,
        cost: cumulative.cost,
        ppc,
        trajectory: Vec::new(),
    }
}

/// Achieved value of a KPI in fen. PPC before the first conversion is
/// cost / 1 so that the signal is defined and pessimistic.
pub fn feedback_value(constraint: &KpiConstraint, counters: &Counters) -> f64 {
    match constraint.kind {
        ConstraintKind::Budget => counters.cost as f64,
        ConstraintKind::PpcTarget => counters.cost as f64 / counters.conversions.max(1) as f64,
    }
}
