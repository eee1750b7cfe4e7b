//! Python bindings: synthetic logs, single replays, the experiment harness and
//! a step-by-step handle on the learning controller.

use std::path::PathBuf;

use mcmf_core::data::{CanonicalWriter, SynthConfig, SyntheticLog};
use mcmf_core::harness::{self, Condition, ConstraintMode, ControllerKind, ExperimentSpec, HarnessError, RunRecord};
use mcmf_core::mcmf::{build_input, kpi_error, McmfConfig};
use mcmf_core::sim::{BidController, Decision, Observation};
use mcmf_core::{BidRecord, ConstraintSet, Counters, McmfController, PeriodFeedback};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn harness_err(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn spec_from(config: Option<&str>) -> PyResult<ExperimentSpec> {
    match config {
        Some(text) => ExperimentSpec::from_toml(text).map_err(harness_err),
        None => Ok(ExperimentSpec::default()),
    }
}

fn parse_controller(name: &str) -> PyResult<ControllerKind> {
    match name {
        "mcmf" => Ok(ControllerKind::Mcmf),
        "pid" => Ok(ControllerKind::Pid),
        "fixed" => Ok(ControllerKind::Fixed),
        other => Err(PyValueError::new_err(format!("unknown controller `{other}`"))),
    }
}

fn run_dict<'py>(py: Python<'py>, run: &RunRecord) -> PyResult<Bound<'py, PyDict>> {
    let m = &run.result.metrics;
    let d = PyDict::new(py);
    d.set_item("condition", &run.condition)?;
    d.set_item("controller", run.controller.as_str())?;
    d.set_item("trial", run.trial)?;
    d.set_item("imp", m.imp)?;
    d.set_item("clk", m.clk)?;
    d.set_item("conv", m.conv)?;
    d.set_item("cost", m.cost)?;
    d.set_item("ppc", m.ppc)?;
    d.set_item("terminated", run.result.terminated)?;
    let u: Vec<f64> = run.result.trace.iter().map(|t| t.u).collect();
    let j: Vec<f64> = run.result.trace.iter().map(|t| t.cost_j).collect();
    let error: Vec<Vec<f64>> = run.result.trace.iter().map(|t| t.error.clone()).collect();
    d.set_item("u", u)?;
    d.set_item("j", j)?;
    d.set_item("error", error)?;
    d.set_item("trajectory", m.trajectory.clone())?;
    Ok(d)
}

fn counters(d: Option<&Bound<'_, PyDict>>) -> PyResult<Counters> {
    let mut c = Counters::default();
    let Some(d) = d else {
        return Ok(c);
    };
    for (k, v) in d.iter() {
        let key: String = k.extract()?;
        match key.as_str() {
            "bids" => c.bids_participated = v.extract()?,
            "impressions" => c.impressions = v.extract()?,
            "clicks" => c.clicks = v.extract()?,
            "conversions" => c.conversions = v.extract()?,
            "cost" => c.cost = v.extract()?,
            "sum_pctr" => c.sum_pctr = v.extract()?,
            "sum_pcvr" => c.sum_pcvr = v.extract()?,
            other => return Err(PyValueError::new_err(format!("unknown counter `{other}`"))),
        }
    }
    Ok(c)
}

/// `1000 · pctr · pcvr · ppc_expected · u`
#[pyfunction]
fn adjusted_ecpm(pctr: f64, pcvr: f64, ppc_expected: f64, u: f64) -> f64 {
    let r = BidRecord {
        ts: 0,
        pctr,
        pcvr,
        market_price: 0,
        click: false,
        conversion: false,
    };
    mcmf_core::mcmf::adjusted_ecpm(&r, ppc_expected, u)
}

/// Writes a synthetic canonical log and returns the number of records.
#[pyfunction]
#[pyo3(signature = (path, n_records=100_000, seed=1, ctr_true=0.05, cvr_true=0.1))]
fn generate_synthetic(path: PathBuf, n_records: usize, seed: u64, ctr_true: f64, cvr_true: f64) -> PyResult<usize> {
    let log = SyntheticLog::new(SynthConfig {
        n_records,
        seed,
        ctr_true,
        cvr_true,
        ..SynthConfig::default()
    })
    .map_err(value_err)?;
    let n = log.len();
    let file = std::fs::File::create(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
    let mut w = CanonicalWriter::new(std::io::BufWriter::new(file)).map_err(value_err)?;
    for r in log {
        w.write(&r).map_err(value_err)?;
    }
    w.finish().map_err(value_err)?;
    Ok(n)
}

/// Default experiment config as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ExperimentSpec::default().to_toml().map_err(harness_err)
}

/// One replay of `controller` on a canonical log. Controller, period and PPC
/// settings come from `config` (experiment TOML) or the defaults.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (log_path, controller, budget, multi=false, config=None, seed=0, dropout_p=0.0))]
fn run_campaign<'py>(
    py: Python<'py>,
    log_path: PathBuf,
    controller: &str,
    budget: u64,
    multi: bool,
    config: Option<&str>,
    seed: u64,
    dropout_p: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut spec = spec_from(config)?;
    let mode = if multi { ConstraintMode::Multi } else { ConstraintMode::Single };
    spec.conditions = vec![Condition::new("campaign", budget, mode)];
    spec.controllers = vec![parse_controller(controller)?];
    spec.log = harness::LogSource::File { path: log_path };
    spec.sim.dropout_p = dropout_p;
    spec.base_seed = seed;
    spec.resample_log = false;
    let runs = py.detach(|| harness::simulate(&spec, dropout_p, 1)).map_err(harness_err)?;
    run_dict(py, &runs[0])
}

/// Every condition × controller × trial of the config, in memory.
#[pyfunction]
#[pyo3(signature = (config=None, dropout_p=None, trials=None))]
fn simulate<'py>(
    py: Python<'py>,
    config: Option<&str>,
    dropout_p: Option<f64>,
    trials: Option<usize>,
) -> PyResult<Bound<'py, PyList>> {
    let spec = spec_from(config)?;
    let p = dropout_p.unwrap_or(spec.sim.dropout_p);
    let n = trials.unwrap_or(spec.trials);
    let runs = py.detach(|| harness::simulate(&spec, p, n)).map_err(harness_err)?;
    let out = PyList::empty(py);
    for run in &runs {
        out.append(run_dict(py, run)?)?;
    }
    Ok(out)
}

fn with_output(config: Option<&str>, output_dir: Option<PathBuf>) -> PyResult<ExperimentSpec> {
    let mut spec = spec_from(config)?;
    if let Some(dir) = output_dir {
        spec.output_dir = dir;
    }
    Ok(spec)
}

/// Runs the experiment and writes its CSVs and manifest; returns the number
/// of replays.
#[pyfunction]
#[pyo3(signature = (config=None, output_dir=None))]
fn run_experiment(py: Python<'_>, config: Option<&str>, output_dir: Option<PathBuf>) -> PyResult<usize> {
    let spec = with_output(config, output_dir)?;
    py.detach(|| harness::run_experiment(&spec).map(|r| r.len())).map_err(harness_err)
}

/// Runs the dropout sweep; returns the summary rows.
#[pyfunction]
#[pyo3(signature = (config=None, output_dir=None))]
fn sweep_sparsity<'py>(
    py: Python<'py>,
    config: Option<&str>,
    output_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyList>> {
    let spec = with_output(config, output_dir)?;
    let rows = py.detach(|| harness::sweep_sparsity(&spec)).map_err(harness_err)?;
    let out = PyList::empty(py);
    for r in rows {
        let d = PyDict::new(py);
        d.set_item("p", r.p)?;
        d.set_item("condition", r.condition)?;
        d.set_item("controller", r.controller)?;
        d.set_item("trials", r.trials)?;
        d.set_item("mean_conv", r.mean_conv)?;
        d.set_item("sd_conv", r.sd_conv)?;
        d.set_item("ci_low", r.ci_low)?;
        d.set_item("ci_high", r.ci_high)?;
        d.set_item("mean_cost", r.mean_cost)?;
        d.set_item("budget_safe", r.budget_safe)?;
        out.append(d)?;
    }
    Ok(out)
}

/// Runs the feature ablation; returns the number of replays.
#[pyfunction]
#[pyo3(signature = (config=None, output_dir=None))]
fn run_ablation(py: Python<'_>, config: Option<&str>, output_dir: Option<PathBuf>) -> PyResult<usize> {
    let spec = with_output(config, output_dir)?;
    py.detach(|| harness::run_ablation(&spec).map(|r| r.len())).map_err(harness_err)
}

/// Re-runs an experiment from its manifest.
#[pyfunction]
#[pyo3(signature = (manifest, output_dir=None))]
fn rerun_manifest(py: Python<'_>, manifest: PathBuf, output_dir: Option<PathBuf>) -> PyResult<()> {
    py.detach(|| harness::rerun_manifest(&manifest, output_dir.as_deref())).map_err(harness_err)
}

/// The learning controller driven one period at a time from Python.
///
/// Counters are dicts with any of `bids`, `impressions`, `clicks`,
/// `conversions`, `cost`, `sum_pctr`, `sum_pcvr`; missing keys are zero.
#[pyclass(name = "McmfController", module = "mcmf_lab")]
struct PyMcmf {
    inner: McmfController,
    constraints: ConstraintSet,
    cumulative: Counters,
    period: usize,
}

#[pymethods]
impl PyMcmf {
    /// `config` is TOML with the controller's own keys (`hidden_dim`,
    /// `output_scale`, `feature_set`, ...).
    #[new]
    #[pyo3(signature = (ppc_expected=1800.0, budget=None, q_ppc=1.0, q_budget=1.0, config=None))]
    fn new(ppc_expected: f64, budget: Option<u64>, q_ppc: f64, q_budget: f64, config: Option<&str>) -> PyResult<Self> {
        let constraints = match budget {
            Some(b) => ConstraintSet::multi(ppc_expected, b, q_ppc, q_budget),
            None => ConstraintSet::single(ppc_expected, q_ppc),
        }
        .map_err(value_err)?;
        let config: McmfConfig = match config {
            Some(text) => toml::from_str(text).map_err(value_err)?,
            None => McmfConfig::default(),
        };
        let inner = McmfController::new(config, &constraints).map_err(value_err)?;
        Ok(Self {
            inner,
            constraints,
            cumulative: Counters::default(),
            period: 0,
        })
    }

    /// Multiplier for the next period given the campaign totals so far.
    #[pyo3(signature = (cumulative=None, elapsed_fraction=0.0))]
    fn decide(&mut self, cumulative: Option<&Bound<'_, PyDict>>, elapsed_fraction: f64) -> PyResult<f64> {
        self.cumulative = counters(cumulative)?;
        Ok(self.inner.decide(&Decision {
            constraints: &self.constraints,
            cumulative: &self.cumulative,
            elapsed_fraction,
            period: self.period,
        }))
    }

    /// Feeds back the period just played; returns `(errors, cost)` and
    /// updates the weights once enough history exists.
    fn observe(
        &mut self,
        period: &Bound<'_, PyDict>,
        cumulative: &Bound<'_, PyDict>,
        elapsed_fraction: f64,
    ) -> PyResult<(Vec<f64>, f64)> {
        let feedback = PeriodFeedback {
            period: counters(Some(period))?,
            cumulative: counters(Some(cumulative))?,
        };
        let diag = self.inner.observe(&Observation {
            constraints: &self.constraints,
            feedback: &feedback,
            elapsed_fraction,
            period: self.period,
        });
        self.period += 1;
        Ok((diag.error, diag.cost))
    }

    /// Normalized KPI errors for the given totals, without touching state.
    fn errors(&self, cumulative: &Bound<'_, PyDict>, elapsed_fraction: f64) -> PyResult<Vec<f64>> {
        let c = counters(Some(cumulative))?;
        Ok(kpi_error(&self.constraints, &c, elapsed_fraction, self.inner.config().budget_error_mode))
    }

    /// Input vector the controller would see for the given totals.
    fn features(&self, cumulative: &Bound<'_, PyDict>) -> PyResult<Vec<f64>> {
        let c = counters(Some(cumulative))?;
        Ok(build_input(&self.constraints, &c, self.inner.config().feature_set))
    }

    #[getter]
    fn u(&self) -> f64 {
        self.inner.state().u_curr
    }

    #[getter]
    fn w_enc(&self) -> Vec<Vec<f64>> {
        let w = &self.inner.state().w_enc;
        (0..w.rows()).map(|r| w.row(r).to_vec()).collect()
    }

    #[getter]
    fn w_dec(&self) -> Vec<f64> {
        self.inner.state().w_dec.clone()
    }

    /// `(encoder, decoder)` update flags of the latest observation.
    #[getter]
    fn last_update(&self) -> (bool, bool) {
        let r = self.inner.last_update();
        (r.enc_applied, r.dec_applied)
    }
}

#[pymodule]
fn mcmf_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(adjusted_ecpm, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_campaign, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_sparsity, m)?)?;
    m.add_function(wrap_pyfunction!(run_ablation, m)?)?;
    m.add_function(wrap_pyfunction!(rerun_manifest, m)?)?;
    m.add_class::<PyMcmf>()?;
    Ok(())
}
