//! Experiment driver: runs controllers over budget/constraint conditions,
//! sparsity sweeps and feature ablations, and writes the CSV results with a
//! manifest that reproduces them.

mod report;
mod spec;

pub use report::{ci95, mean_sd, AblationRow, SummaryRow, SweepRow};
pub use spec::{
    Condition, ConstraintMode, ConstraintParams, ControllerKind, ExperimentSpec, FixedParams, LogSource, BudgetPreset,
    SimParams, SweepParams, BENCHMARK_ADEQUATE_BUDGET, BENCHMARK_ENCODER_INIT, BENCHMARK_OUTPUT_SCALE,
    BENCHMARK_RECORDS, BENCHMARK_TIGHT_BUDGET, PRESET_ADEQUATE_BUDGET, PRESET_PPC_EXPECTED, PRESET_TIGHT_BUDGET,
};

use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{FixedController, PidController};
use crate::data::{generate_synthetic, read_canonical_file, DataError, SynthConfig};
use crate::mcmf::{FeatureSet, McmfConfig, McmfController};
use crate::sim::{apply_dropout, run_campaign, BidController, CampaignResult, SimConfig};
use crate::types::{BidRecord, Fen};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Short category for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Data(_) => "data",
            HarnessError::Io { .. } => "io",
            HarnessError::Csv(_) => "csv",
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Independent random streams derived from the base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Log = 1,
    Controller = 2,
    Dropout = 3,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 63-bit so that seeds stay representable as TOML integers.
pub fn derive_seed(base: u64, stream: SeedStream, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ (stream as u64).wrapping_mul(0xd1b5_4a32_d192_ed03)) ^ index) >> 1
}

/// Seeds used by one trial; written to the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSeeds {
    pub trial: u64,
    /// Synthetic log seed, present when logs are resampled per trial.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<u64>,
    pub controller: u64,
    pub dropout: u64,
}

impl TrialSeeds {
    pub fn new(spec: &ExperimentSpec, trial: u64) -> Self {
        let resampled = spec.resample_log && matches!(spec.log, LogSource::Synthetic(_));
        Self {
            trial,
            log: resampled.then(|| derive_seed(spec.base_seed, SeedStream::Log, trial)),
            controller: derive_seed(spec.base_seed, SeedStream::Controller, trial),
            dropout: derive_seed(spec.base_seed, SeedStream::Dropout, trial),
        }
    }
}

/// FNV-1a over every field of the record stream; equal streams hash equal.
pub fn stream_hash(records: &[BidRecord]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for r in records {
        eat(&r.ts.to_le_bytes());
        eat(&r.pctr.to_bits().to_le_bytes());
        eat(&r.pcvr.to_bits().to_le_bytes());
        eat(&r.market_price.to_le_bytes());
        eat(&[u8::from(r.click), u8::from(r.conversion)]);
    }
    h
}

/// Log shared by every trial unless logs are resampled.
pub fn load_log(spec: &ExperimentSpec) -> Result<Vec<BidRecord>, HarnessError> {
    match &spec.log {
        LogSource::File { path } => Ok(read_canonical_file(path)?),
        LogSource::Synthetic(cfg) => Ok(generate_synthetic(cfg)?),
    }
}

fn trial_log<'a>(spec: &ExperimentSpec, shared: &'a [BidRecord], seeds: &TrialSeeds) -> Result<Cow<'a, [BidRecord]>, HarnessError> {
    match (&spec.log, seeds.log) {
        (LogSource::Synthetic(cfg), Some(seed)) => Ok(Cow::Owned(generate_synthetic(&SynthConfig {
            seed,
            ..cfg.clone()
        })?)),
        _ => Ok(Cow::Borrowed(shared)),
    }
}

fn thin<'a>(log: Cow<'a, [BidRecord]>, p: f64, seed: u64) -> Cow<'a, [BidRecord]> {
    if p > 0.0 {
        Cow::Owned(apply_dropout(&log, p, seed))
    } else {
        log
    }
}

pub fn build_controller(
    spec: &ExperimentSpec,
    kind: ControllerKind,
    condition: &Condition,
    controller_seed: u64,
) -> Result<Box<dyn BidController + Send>, HarnessError> {
    let cs = spec.constraint_set(condition)?;
    Ok(match kind {
        ControllerKind::Mcmf => {
            let config = McmfConfig {
                rng_seed: controller_seed,
                ..spec.mcmf.clone()
            };
            Box::new(McmfController::new(config, &cs).map_err(|e| HarnessError::Config(e.to_string()))?)
        }
        ControllerKind::Pid => Box::new(PidController::new(spec.pid.clone())),
        ControllerKind::Fixed => Box::new(FixedController::new(spec.fixed.u)),
    })
}

/// One replay of one controller under one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub condition: String,
    pub controller: ControllerKind,
    pub trial: u64,
    pub budget: Fen,
    /// Largest market price of the replayed (post-dropout) log.
    pub max_price: Fen,
    pub stream_hash: u64,
    pub result: CampaignResult,
}

fn replay_cell(
    spec: &ExperimentSpec,
    log: &[BidRecord],
    condition: &Condition,
    kind: ControllerKind,
    seeds: &TrialSeeds,
) -> Result<RunRecord, HarnessError> {
    let cs = spec.constraint_set(condition)?;
    let mut controller = build_controller(spec, kind, condition, seeds.controller)?;
    let sim = SimConfig {
        budget: condition.budget,
        period: spec.sim.period,
        dropout_p: 0.0,
        dropout_seed: 0,
    };
    let result = run_campaign(log, &mut controller, &cs, &sim);
    Ok(RunRecord {
        condition: condition.name.clone(),
        controller: kind,
        trial: seeds.trial,
        budget: condition.budget,
        max_price: log.iter().map(|r| r.market_price).max().unwrap_or(0),
        stream_hash: stream_hash(log),
        result,
    })
}

/// Runs one trial of every condition × controller cell on one log.
fn run_trial(
    spec: &ExperimentSpec,
    shared: &[BidRecord],
    seeds: &TrialSeeds,
    dropout_p: f64,
) -> Result<Vec<RunRecord>, HarnessError> {
    let log = thin(trial_log(spec, shared, seeds)?, dropout_p, seeds.dropout);
    let cells: Vec<(&Condition, ControllerKind)> = spec
        .conditions
        .iter()
        .flat_map(|c| spec.controllers.iter().map(move |k| (c, *k)))
        .collect();
    cells
        .into_par_iter()
        .map(|(c, k)| replay_cell(spec, &log, c, k, seeds))
        .collect()
}

/// All trials of `spec` at dropout `p`, ordered by (trial, condition,
/// controller) regardless of scheduling.
pub fn simulate(spec: &ExperimentSpec, dropout_p: f64, trials: usize) -> Result<Vec<RunRecord>, HarnessError> {
    spec.validate()?;
    let shared = if spec.resample_log && matches!(spec.log, LogSource::Synthetic(_)) {
        Vec::new()
    } else {
        load_log(spec)?
    };
    let per_trial: Vec<Vec<RunRecord>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| run_trial(spec, &shared, &TrialSeeds::new(spec, t), dropout_p))
        .collect::<Result<_, _>>()?;
    Ok(per_trial.into_iter().flatten().collect())
}

/// Which experiment a manifest reproduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Run,
    SweepSparsity,
    Ablation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: Command,
    pub spec: ExperimentSpec,
    pub trials: Vec<TrialSeeds>,
}

impl Manifest {
    pub fn new(command: Command, spec: &ExperimentSpec) -> Self {
        let n = match command {
            Command::SweepSparsity => spec.sweep.trials,
            _ => spec.trials,
        };
        Self {
            command,
            spec: spec.clone(),
            trials: (0..n as u64).map(|t| TrialSeeds::new(spec, t)).collect(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string().replace('\n', " ")))
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }
}

/// Reads either a plain experiment spec or a manifest written by a previous
/// run; the latter also names the command.
pub fn load_config(path: &Path) -> Result<(ExperimentSpec, Option<Command>), HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string().replace('\n', " ")))?;
    if table.contains_key("spec") {
        let m = Manifest::from_toml(&text)?;
        Ok((m.spec, Some(m.command)))
    } else {
        Ok((ExperimentSpec::from_toml(&text)?, None))
    }
}

/// Runs whatever the manifest describes, writing into `output_dir` if given.
pub fn rerun_manifest(path: &Path, output_dir: Option<&Path>) -> Result<(), HarnessError> {
    let (mut spec, command) = load_config(path)?;
    if let Some(dir) = output_dir {
        spec.output_dir = dir.to_path_buf();
    }
    match command {
        Some(Command::Run) | None => run_experiment(&spec).map(drop),
        Some(Command::SweepSparsity) => sweep_sparsity(&spec).map(drop),
        Some(Command::Ablation) => run_ablation(&spec).map(drop),
    }
}

fn prepare_dir(spec: &ExperimentSpec, command: Command) -> Result<(), HarnessError> {
    let dir = &spec.output_dir;
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let path = dir.join("manifest.toml");
    fs::write(&path, Manifest::new(command, spec).to_toml()?).map_err(|e| HarnessError::io(&path, e))
}

/// Runs every condition × controller × trial and writes `metrics.csv`,
/// `trace.csv` and `manifest.toml` into the output directory.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<RunRecord>, HarnessError> {
    let runs = simulate(spec, spec.sim.dropout_p, spec.trials)?;
    prepare_dir(spec, Command::Run)?;
    report::write_metrics(&spec.output_dir.join("metrics.csv"), &runs)?;
    report::write_trace(&spec.output_dir.join("trace.csv"), spec, &runs)?;
    Ok(runs)
}

/// Dropout sweep: for each `p` and trial `t` one mask seeded by
/// `(base_seed, t)` is shared by every controller. Writes the per-trial
/// `sweep_raw.csv` and the per-`p` `sweep_summary.csv`.
pub fn sweep_sparsity(spec: &ExperimentSpec) -> Result<Vec<SummaryRow>, HarnessError> {
    spec.validate()?;
    let rows: Vec<SweepRow> = spec
        .sweep
        .p_list
        .iter()
        .map(|&p| {
            simulate(spec, p, spec.sweep.trials).map(|runs| runs.into_iter().map(|run| SweepRow { p, run }).collect())
        })
        .collect::<Result<Vec<Vec<SweepRow>>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    let summary = report::summarize(spec, &rows);
    prepare_dir(spec, Command::SweepSparsity)?;
    report::write_sweep_raw(&spec.output_dir.join("sweep_raw.csv"), &rows)?;
    report::write_sweep_summary(&spec.output_dir.join("sweep_summary.csv"), &summary)?;
    Ok(summary)
}

/// Same spec under each feature set with identical seeds; the controller list
/// is reduced to the learning controller. Writes `ablation.csv`.
pub fn run_ablation(spec: &ExperimentSpec) -> Result<Vec<AblationRow>, HarnessError> {
    let mut rows = Vec::new();
    for fs in FeatureSet::ALL {
        let mut variant = spec.clone();
        variant.controllers = vec![ControllerKind::Mcmf];
        variant.mcmf.feature_set = fs;
        let runs = simulate(&variant, spec.sim.dropout_p, spec.trials)?;
        rows.extend(runs.into_iter().map(|run| AblationRow { feature_set: fs, run }));
    }
    prepare_dir(spec, Command::Ablation)?;
    report::write_ablation(&spec.output_dir.join("ablation.csv"), &rows)?;
    Ok(rows)
}
