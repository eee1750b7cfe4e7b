//! CSV emission and confidence-interval arithmetic.

use std::path::Path;

use super::{ExperimentSpec, HarnessError, RunRecord};
use crate::mcmf::FeatureSet;
use crate::types::ConstraintKind;

/// Normal-approximation 95% interval half-width factor.
const Z95: f64 = 1.96;

/// Mean and sample standard deviation; the deviation is 0 below two values.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// `mean ± 1.96·s/√n`.
pub fn ci95(values: &[f64]) -> (f64, f64) {
    let (mean, sd) = mean_sd(values);
    let half = Z95 * sd / (values.len().max(1) as f64).sqrt();
    (mean - half, mean + half)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, HarnessError> {
    csv::Writer::from_path(path).map_err(HarnessError::from)
}

const METRIC_COLUMNS: [&str; 7] = ["imp", "clk", "conv", "cost", "ppc", "periods", "terminated"];

fn metric_fields(run: &RunRecord) -> [String; 7] {
    let m = &run.result.metrics;
    [
        m.imp.to_string(),
        m.clk.to_string(),
        m.conv.to_string(),
        m.cost.to_string(),
        opt(m.ppc),
        run.result.trace.len().to_string(),
        u8::from(run.result.terminated).to_string(),
    ]
}

pub(crate) fn write_metrics(path: &Path, runs: &[RunRecord]) -> Result<(), HarnessError> {
    let mut w = writer(path)?;
    let mut header = vec!["condition", "controller", "trial"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header)?;
    for run in runs {
        let mut row = vec![run.condition.clone(), run.controller.as_str().to_string(), run.trial.to_string()];
        row.extend(metric_fields(run));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| HarnessError::Csv(e.into()))
}

/// One row per period: the multiplier, the error of each constraint (empty
/// when the condition lacks it), the period cost `j`, its sum over the last
/// `window` periods, and cumulative conversions and cost.
pub(crate) fn write_trace(path: &Path, spec: &ExperimentSpec, runs: &[RunRecord]) -> Result<(), HarnessError> {
    let mut w = writer(path)?;
    w.write_record([
        "condition",
        "controller",
        "trial",
        "period",
        "u",
        "e_ppc",
        "e_budget",
        "j",
        "j_window",
        "conv",
        "cost",
    ])?;
    let window = spec.mcmf.window;
    for run in runs {
        let condition = spec
            .conditions
            .iter()
            .find(|c| c.name == run.condition)
            .expect("run of a known condition");
        let cs = spec.constraint_set(condition)?;
        let slot = |kind| cs.constraints().iter().position(|c| c.kind == kind);
        let (ppc_slot, budget_slot) = (slot(ConstraintKind::PpcTarget), slot(ConstraintKind::Budget));
        let trace = &run.result.trace;
        for (i, row) in trace.iter().enumerate() {
            let j_window: f64 = trace[(i + 1).saturating_sub(window)..=i].iter().map(|r| r.cost_j).sum();
            let e = |s: Option<usize>| opt(s.and_then(|k| row.error.get(k).copied()));
            w.write_record([
                run.condition.clone(),
                run.controller.as_str().to_string(),
                run.trial.to_string(),
                row.period.to_string(),
                row.u.to_string(),
                e(ppc_slot),
                e(budget_slot),
                row.cost_j.to_string(),
                j_window.to_string(),
                row.cumulative.conversions.to_string(),
                row.cumulative.cost.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| HarnessError::Csv(e.into()))
}

/// One sweep replay at dropout `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub p: f64,
    pub run: RunRecord,
}

/// Aggregate of one `(p, condition, controller)` cell over trials.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub p: f64,
    pub condition: String,
    pub controller: String,
    pub trials: usize,
    pub mean_conv: f64,
    pub sd_conv: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_cost: f64,
    /// Trials whose cost stayed within budget plus the largest price.
    pub budget_safe: usize,
}

pub(crate) fn summarize(spec: &ExperimentSpec, rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &p in &spec.sweep.p_list {
        for condition in &spec.conditions {
            for kind in &spec.controllers {
                let cell: Vec<&RunRecord> = rows
                    .iter()
                    .filter(|r| r.p == p && r.run.condition == condition.name && r.run.controller == *kind)
                    .map(|r| &r.run)
                    .collect();
                let conv: Vec<f64> = cell.iter().map(|r| r.result.metrics.conv as f64).collect();
                let cost: Vec<f64> = cell.iter().map(|r| r.result.metrics.cost as f64).collect();
                let (mean_conv, sd_conv) = mean_sd(&conv);
                let (ci_low, ci_high) = ci95(&conv);
                out.push(SummaryRow {
                    p,
                    condition: condition.name.clone(),
                    controller: kind.as_str().to_string(),
                    trials: cell.len(),
                    mean_conv,
                    sd_conv,
                    ci_low,
                    ci_high,
                    mean_cost: mean_sd(&cost).0,
                    budget_safe: cell
                        .iter()
                        .filter(|r| r.result.metrics.cost <= r.budget + r.max_price)
                        .count(),
                });
            }
        }
    }
    out
}

pub(crate) fn write_sweep_raw(path: &Path, rows: &[SweepRow]) -> Result<(), HarnessError> {
    let mut w = writer(path)?;
    let mut header = vec!["p", "condition", "controller", "trial", "budget", "max_price", "stream_hash"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header)?;
    for SweepRow { p, run } in rows {
        let mut row = vec![
            p.to_string(),
            run.condition.clone(),
            run.controller.as_str().to_string(),
            run.trial.to_string(),
            run.budget.to_string(),
            run.max_price.to_string(),
            format!("{:016x}", run.stream_hash),
        ];
        row.extend(metric_fields(run));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| HarnessError::Csv(e.into()))
}

pub(crate) fn write_sweep_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), HarnessError> {
    let mut w = writer(path)?;
    w.write_record([
        "p",
        "condition",
        "controller",
        "trials",
        "mean_conv",
        "sd_conv",
        "ci_low",
        "ci_high",
        "mean_cost",
        "budget_safe",
    ])?;
    for r in rows {
        w.write_record([
            r.p.to_string(),
            r.condition.clone(),
            r.controller.clone(),
            r.trials.to_string(),
            r.mean_conv.to_string(),
            r.sd_conv.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
            r.mean_cost.to_string(),
            r.budget_safe.to_string(),
        ])?;
    }
    w.flush().map_err(|e| HarnessError::Csv(e.into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub feature_set: FeatureSet,
    pub run: RunRecord,
}

pub(crate) fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<(), HarnessError> {
    let mut w = writer(path)?;
    let mut header = vec!["feature_set", "condition", "trial"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![
            r.feature_set.as_str().to_string(),
            r.run.condition.clone(),
            r.run.trial.to_string(),
        ];
        row.extend(metric_fields(&r.run));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| HarnessError::Csv(e.into()))
}
