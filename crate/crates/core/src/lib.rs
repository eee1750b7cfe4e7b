//! Real-time bidding lab: an online bid-adjustment controller trained from
//! KPI feedback, a PID and a fixed-multiplier baseline, a second-price
//! auction replay and an experiment harness around them.

pub mod baselines;
pub mod data;
pub mod harness;
pub mod mcmf;
pub mod sim;
pub mod types;

pub use baselines::{FixedController, PidConfig, PidController};
pub use mcmf::{FeatureSet, McmfConfig, McmfController};
pub use sim::{run_campaign, BidController, CampaignResult, PeriodMode, SimConfig};
pub use types::{BidRecord, CampaignMetrics, ConstraintKind, ConstraintSet, Counters, Fen, KpiConstraint, PeriodFeedback};
