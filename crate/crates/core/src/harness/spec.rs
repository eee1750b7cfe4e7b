use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::baselines::PidConfig;
use crate::data::SynthConfig;
use crate::mcmf::McmfConfig;
use crate::sim::PeriodMode;
use crate::types::{ConstraintSet, Fen};

/// Budget of the adequate preset, fen.
pub const PRESET_ADEQUATE_BUDGET: Fen = 182_344;
/// Budget of the tight preset, fen.
pub const PRESET_TIGHT_BUDGET: Fen = 22_793;
/// Expected PPC of both presets, fen.
pub const PRESET_PPC_EXPECTED: f64 = 1800.0;

/// Benchmark log length: 200 periods of 1000 records.
pub const BENCHMARK_RECORDS: usize = 200_000;
/// Adequate benchmark budget, 8 fen per record. The stationary environment
/// spends under it even at the largest multiplier.
pub const BENCHMARK_ADEQUATE_BUDGET: Fen = 1_600_000;
/// Tight benchmark budget, one eighth of the adequate one as in the presets.
pub const BENCHMARK_TIGHT_BUDGET: Fen = 200_000;
/// Multiplier ceiling of the benchmark. Bids are per mille while the log
/// charges raw prices, so `u = 0.001` bids the expected conversion value of an
/// impression; the controllers start there, at half the ceiling.
pub const BENCHMARK_OUTPUT_SCALE: f64 = 0.002;
/// Encoder init scale of the benchmark.
pub const BENCHMARK_ENCODER_INIT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum LogSource {
    /// Canonical log file.
    File { path: PathBuf },
    Synthetic(SynthConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Mcmf,
    Pid,
    Fixed,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::Mcmf => "mcmf",
            ControllerKind::Pid => "pid",
            ControllerKind::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// PPC target only.
    Single,
    /// PPC target and budget.
    Multi,
}

/// One budget/constraint cell of the experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub name: String,
    pub budget: Fen,
    pub constraints: ConstraintMode,
}

impl Condition {
    pub fn new(name: &str, budget: Fen, constraints: ConstraintMode) -> Self {
        Self {
            name: name.to_string(),
            budget,
            constraints,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintParams {
    pub ppc_expected: f64,
    pub q_ppc: f64,
    pub q_budget: f64,
}

impl Default for ConstraintParams {
    fn default() -> Self {
        Self {
            ppc_expected: PRESET_PPC_EXPECTED,
            q_ppc: 1.0,
            q_budget: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub period: PeriodMode,
    /// Dropout applied in `run` and `ablation`; the sweep sets its own.
    pub dropout_p: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            period: PeriodMode::default(),
            dropout_p: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedParams {
    pub u: f64,
}

impl Default for FixedParams {
    fn default() -> Self {
        Self { u: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepParams {
    pub p_list: Vec<f64>,
    pub trials: usize,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            p_list: (1..=9).map(|k| f64::from(k) / 10.0).collect(),
            trials: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetPreset {
    Adequate,
    Tight,
}

/// Everything an experiment needs. The manifest written next to the results
/// embeds the resolved spec, so a run can be repeated from it alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub base_seed: u64,
    /// Runs of `run` and `ablation`; the sweep uses `sweep.trials`.
    pub trials: usize,
    /// Draw a fresh synthetic log per trial instead of reusing one.
    pub resample_log: bool,
    pub output_dir: PathBuf,
    pub controllers: Vec<ControllerKind>,
    pub log: LogSource,
    pub conditions: Vec<Condition>,
    pub constraints: ConstraintParams,
    pub sim: SimParams,
    pub mcmf: McmfConfig,
    pub pid: PidConfig,
    pub fixed: FixedParams,
    pub sweep: SweepParams,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self::synthetic_benchmark()
    }
}

impl ExperimentSpec {
    /// Stationary synthetic benchmark: 200 periods, adequate and tight
    /// budgets, single and multi constraints, all three controllers scaled to
    /// the same multiplier range.
    pub fn synthetic_benchmark() -> Self {
        let u_max = BENCHMARK_OUTPUT_SCALE;
        Self {
            base_seed: 1,
            trials: 1,
            resample_log: false,
            output_dir: PathBuf::from("out"),
            controllers: vec![ControllerKind::Mcmf, ControllerKind::Pid, ControllerKind::Fixed],
            log: LogSource::Synthetic(SynthConfig {
                n_records: BENCHMARK_RECORDS,
                ..SynthConfig::default()
            }),
            conditions: vec![
                Condition::new("adequate-single", BENCHMARK_ADEQUATE_BUDGET, ConstraintMode::Single),
                Condition::new("adequate-multi", BENCHMARK_ADEQUATE_BUDGET, ConstraintMode::Multi),
                Condition::new("tight-single", BENCHMARK_TIGHT_BUDGET, ConstraintMode::Single),
                Condition::new("tight-multi", BENCHMARK_TIGHT_BUDGET, ConstraintMode::Multi),
            ],
            constraints: ConstraintParams::default(),
            sim: SimParams::default(),
            mcmf: McmfConfig {
                output_scale: u_max,
                encoder_init: BENCHMARK_ENCODER_INIT,
                ..McmfConfig::default()
            },
            pid: PidConfig {
                u_min: u_max / 100.0,
                u_max,
                u_init: u_max / 2.0,
                ..PidConfig::default()
            },
            fixed: FixedParams { u: u_max / 2.0 },
            sweep: SweepParams::default(),
        }
    }

    /// Replaces the conditions with the preset budget and PPC target, single
    /// and multi constraint. Meant for real logs in raw price units.
    pub fn apply_preset(&mut self, preset: BudgetPreset) {
        let (label, budget) = match preset {
            BudgetPreset::Adequate => ("adequate", PRESET_ADEQUATE_BUDGET),
            BudgetPreset::Tight => ("tight", PRESET_TIGHT_BUDGET),
        };
        self.constraints.ppc_expected = PRESET_PPC_EXPECTED;
        self.conditions = vec![
            Condition::new(&format!("{label}-single"), budget, ConstraintMode::Single),
            Condition::new(&format!("{label}-multi"), budget, ConstraintMode::Multi),
        ];
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string().replace('\n', " ")))
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if i64::try_from(self.base_seed).is_err() {
            return bad(format!("base_seed must be below 2^63, got {}", self.base_seed));
        }
        if self.trials == 0 || self.sweep.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.controllers.is_empty() {
            return bad("no controllers selected".into());
        }
        if self.conditions.is_empty() {
            return bad("no conditions given".into());
        }
        for (i, c) in self.conditions.iter().enumerate() {
            if c.name.is_empty() || self.conditions[..i].iter().any(|o| o.name == c.name) {
                return bad(format!("condition names must be nonempty and unique, got `{}`", c.name));
            }
            self.constraint_set(c)?;
        }
        if let Some(p) = self.sweep.p_list.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return bad(format!("sweep probability {p} outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.sim.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1]", self.sim.dropout_p));
        }
        match self.sim.period {
            PeriodMode::Count(0) => return bad("period count must be positive".into()),
            PeriodMode::WallClock(ms) if ms <= 0 => return bad("period span must be positive".into()),
            _ => {}
        }
        self.mcmf.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.pid.validate().map_err(HarnessError::Config)?;
        if !(self.fixed.u.is_finite() && self.fixed.u > 0.0) {
            return bad("fixed multiplier must be positive".into());
        }
        match &self.log {
            LogSource::File { path } if !path.is_file() => bad(format!("log file {} does not exist", path.display())),
            LogSource::Synthetic(cfg) => cfg.validate().map_err(HarnessError::from),
            _ => Ok(()),
        }
    }

    pub fn constraint_set(&self, condition: &Condition) -> Result<ConstraintSet, HarnessError> {
        let p = &self.constraints;
        let cs = match condition.constraints {
            ConstraintMode::Single => ConstraintSet::single(p.ppc_expected, p.q_ppc),
            ConstraintMode::Multi => ConstraintSet::multi(p.ppc_expected, condition.budget, p.q_ppc, p.q_budget),
        };
        cs.map_err(|e| HarnessError::Config(format!("condition `{}`: {e}", condition.name)))
    }
}
