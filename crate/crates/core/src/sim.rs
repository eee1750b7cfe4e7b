//! Second-price auction replay.
//!
//! The logged market price stands in for the highest competing bid: a bid
//! strictly above it wins and pays it. Labels of a record are realized only
//! when it is won. Records are grouped into periods; the controller picks one
//! multiplier per period and sees the period's outcome afterwards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mcmf::adjusted_ecpm;
use crate::types::{compute_metrics, BidRecord, CampaignMetrics, ConstraintSet, Counters, Fen, PeriodFeedback};

/// How records are grouped into control periods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeriodMode {
    /// Fixed number of records per period.
    Count(usize),
    /// Fixed wall-clock span in milliseconds, measured from the first record.
    WallClock(i64),
}

impl Default for PeriodMode {
    fn default() -> Self {
        PeriodMode::Count(1000)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub budget: Fen,
    pub period: PeriodMode,
    pub dropout_p: f64,
    pub dropout_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            budget: 0,
            period: PeriodMode::default(),
            dropout_p: 0.0,
            dropout_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(format!("dropout_p must be in [0, 1], got {}", self.dropout_p));
        }
        match self.period {
            PeriodMode::Count(0) => Err("period count must be positive".into()),
            PeriodMode::WallClock(ms) if ms <= 0 => Err("period span must be positive".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuctionOutcome {
    Win { cost: Fen },
    Lose,
    /// Budget already used up; the record is not bid on.
    Terminated,
}

/// Ties lose. Termination takes effect once spend has reached the budget, so
/// the single win that crosses it is still paid.
pub fn resolve_auction(record: &BidRecord, ecpm: f64, spent: Fen, budget: Fen) -> AuctionOutcome {
    if spent >= budget {
        AuctionOutcome::Terminated
    } else if ecpm > record.market_price as f64 {
        AuctionOutcome::Win {
            cost: record.market_price,
        }
    } else {
        AuctionOutcome::Lose
    }
}

/// What a controller sees before choosing the period's multiplier.
#[derive(Debug, Clone, Copy)]
pub struct Decision<'a> {
    pub constraints: &'a ConstraintSet,
    pub cumulative: &'a Counters,
    /// Share of the campaign already elapsed.
    pub elapsed_fraction: f64,
    pub period: usize,
}

/// What a controller sees after the period resolved.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub constraints: &'a ConstraintSet,
    pub feedback: &'a PeriodFeedback,
    pub elapsed_fraction: f64,
    pub period: usize,
}

/// Per-period KPI error vector and cost, as the controller computed them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PeriodDiagnostics {
    pub error: Vec<f64>,
    pub cost: f64,
}

/// A per-period bid multiplier policy.
pub trait BidController {
    fn name(&self) -> &str;
    fn decide(&mut self, decision: &Decision<'_>) -> f64;
    fn observe(&mut self, observation: &Observation<'_>) -> PeriodDiagnostics;
}

impl<C: BidController + ?Sized> BidController for Box<C> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn decide(&mut self, decision: &Decision<'_>) -> f64 {
        (**self).decide(decision)
    }
    fn observe(&mut self, observation: &Observation<'_>) -> PeriodDiagnostics {
        (**self).observe(observation)
    }
}

/// Mutable accounting of one replay.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimState {
    pub cumulative: Counters,
    pub budget: Fen,
    pub terminated: bool,
}

impl SimState {
    pub fn new(budget: Fen) -> Self {
        Self {
            budget,
            ..Self::default()
        }
    }
}

/// Prices every record of the batch with the same multiplier and resolves
/// it. Returns the period's counters and folds them into `state`.
pub fn run_period(batch: &[BidRecord], u: f64, constraints: &ConstraintSet, state: &mut SimState) -> PeriodFeedback {
    let ppc_e = constraints.ppc_expected();
    let mut period = Counters::default();
    for record in batch {
        let ecpm = adjusted_ecpm(record, ppc_e, u);
        match resolve_auction(record, ecpm, state.cumulative.cost + period.cost, state.budget) {
            AuctionOutcome::Terminated => {
                state.terminated = true;
                break;
            }
            outcome => {
                period.bids_participated += 1;
                period.sum_pctr += record.pctr;
                period.sum_pcvr += record.pcvr;
                if let AuctionOutcome::Win { cost } = outcome {
                    period.impressions += 1;
                    period.cost += cost;
                    period.clicks += u64::from(record.click);
                    period.conversions += u64::from(record.conversion);
                }
            }
        }
    }
    if state.cumulative.cost + period.cost >= state.budget {
        state.terminated = true;
    }
    state.cumulative.accumulate(&period);
    PeriodFeedback {
        period,
        cumulative: state.cumulative,
    }
}

/// One row of the per-period trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub period: usize,
    pub u: f64,
    pub error: Vec<f64>,
    pub cost_j: f64,
    pub cumulative: Counters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignResult {
    pub metrics: CampaignMetrics,
    pub trace: Vec<TraceRow>,
    /// Whether bidding stopped on the budget rather than at log end.
    pub terminated: bool,
}

/// Splits a time-sorted log into control periods. Wall-clock windows with no
/// records are skipped.
pub fn periods(log: &[BidRecord], mode: PeriodMode) -> Vec<&[BidRecord]> {
    match mode {
        PeriodMode::Count(n) => log.chunks(n.max(1)).collect(),
        PeriodMode::WallClock(span) => {
            let Some(first) = log.first() else {
                return Vec::new();
            };
            let span = span.max(1);
            let window = |r: &BidRecord| (r.ts - first.ts).div_euclid(span);
            log.chunk_by(|a, b| window(a) == window(b)).collect()
        }
    }
}

fn elapsed_after(log: &[BidRecord], consumed: usize, last: Option<&BidRecord>, mode: PeriodMode) -> f64 {
    match mode {
        PeriodMode::Count(_) => consumed as f64 / log.len().max(1) as f64,
        PeriodMode::WallClock(span) => {
            let (Some(first), Some(end)) = (log.first(), log.last()) else {
                return 0.0;
            };
            let Some(last) = last else {
                return 0.0;
            };
            let horizon = ((end.ts - first.ts).div_euclid(span) + 1) * span;
            let done = ((last.ts - first.ts).div_euclid(span) + 1) * span;
            done as f64 / horizon as f64
        }
    }
}

/// Replays `log` under `controller`: decide, run the period, report back, until
/// the log ends or the budget terminates bidding. Dropout from `config` is
/// applied to the log first.
pub fn run_campaign<C: BidController + ?Sized>(
    log: &[BidRecord],
    controller: &mut C,
    constraints: &ConstraintSet,
    config: &SimConfig,
) -> CampaignResult {
    if config.dropout_p > 0.0 {
        let thinned = apply_dropout(log, config.dropout_p, config.dropout_seed);
        replay(&thinned, controller, constraints, config.budget, config.period)
    } else {
        replay(log, controller, constraints, config.budget, config.period)
    }
}

fn replay<C: BidController + ?Sized>(
    log: &[BidRecord],
    controller: &mut C,
    constraints: &ConstraintSet,
    budget: Fen,
    period_mode: PeriodMode,
) -> CampaignResult {
    let mut state = SimState::new(budget);
    let mut trace = Vec::new();
    let mut trajectory = Vec::new();
    let mut consumed = 0;
    let mut elapsed = 0.0;
    if budget == 0 {
        state.terminated = true;
    }
    for (period, batch) in periods(log, period_mode).into_iter().enumerate() {
        if state.terminated {
            break;
        }
        let u = controller.decide(&Decision {
            constraints,
            cumulative: &state.cumulative,
            elapsed_fraction: elapsed,
            period,
        });
        let feedback = run_period(batch, u, constraints, &mut state);
        consumed += batch.len();
        elapsed = elapsed_after(log, consumed, batch.last(), period_mode);
        let diag = controller.observe(&Observation {
            constraints,
            feedback: &feedback,
            elapsed_fraction: elapsed,
            period,
        });
        trajectory.push((feedback.cumulative.conversions, feedback.cumulative.cost));
        trace.push(TraceRow {
            period,
            u,
            error: diag.error,
            cost_j: diag.cost,
            cumulative: feedback.cumulative,
        });
    }
    let mut metrics = compute_metrics(&state.cumulative);
    metrics.trajectory = trajectory;
    CampaignResult {
        metrics,
        trace,
        terminated: state.terminated,
    }
}

/// Keep mask for dropout: record `i` survives when its uniform draw is at
/// least `p`. The draws depend only on the seed, so masks for different `p`
/// with the same seed are nested.
pub fn dropout_mask(len: usize, p: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random::<f64>() >= p).collect()
}

pub fn apply_dropout(log: &[BidRecord], p: f64, seed: u64) -> Vec<BidRecord> {
    if p <= 0.0 {
        return log.to_vec();
    }
    log.iter()
        .zip(dropout_mask(log.len(), p, seed))
        .filter_map(|(r, keep)| keep.then_some(*r))
        .collect()
}
