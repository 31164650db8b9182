//! Python bindings: cohorts, simulation scenarios, regime fitting and the
//! experiment runner.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use regime_kit::balancing::{lambda_grid, solve_weights, BalanceProblem, KernelSpectrum};
use regime_kit::baselines::{
    builtin_formulas, fit_owl_ipw, fit_parametric_q_learning, MissingWeighting, ModelSpec, QFormula,
};
use regime_kit::data_model::{CohortDataset, Combiner};
use regime_kit::dtr::{self, DtrConfig, FittedRegime, InstrumentSplit};
use regime_kit::error::RegimeError;
use regime_kit::experiment::{self, ExperimentConfig, RunOptions};
use regime_kit::kernels::{self, KernelSpec};
use regime_kit::qreg::Penalty;
use regime_kit::simgen::{self, evaluate_regime, ScenarioId, ScenarioSpec, SimulatedData};
use regime_kit::value::Flavor;

fn py_err(e: RegimeError) -> PyErr {
    match e {
        RegimeError::Io(e) => PyOSError::new_err(e.to_string()),
        RegimeError::Numeric(m) => PyRuntimeError::new_err(format!("numeric error: {m}")),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_combiner(name: &str) -> PyResult<Combiner> {
    match name.to_ascii_lowercase().as_str() {
        "sum" => Ok(Combiner::Sum),
        "last" => Ok(Combiner::Last),
        "max" => Ok(Combiner::Max),
        other => Err(PyValueError::new_err(format!("unknown combiner '{other}'"))),
    }
}

fn parse_flavor(name: &str) -> PyResult<Flavor> {
    match name.to_ascii_uppercase().as_str() {
        "CFBL" | "BW" => Ok(Flavor::Bw),
        "ACFBL" | "ABW" => Ok(Flavor::Abw),
        other => Err(PyValueError::new_err(format!(
            "unknown flavor '{other}' (CFBL or ACFBL)"
        ))),
    }
}

fn penalty(value: Option<f64>) -> Penalty {
    value.map_or(Penalty::Auto, Penalty::Fixed)
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let p = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
}

#[pyclass(module = "regime_kit", skip_from_py_object)]
#[derive(Clone)]
struct Cohort {
    inner: CohortDataset,
}

#[pymethods]
impl Cohort {
    #[staticmethod]
    #[pyo3(signature = (path, combiner = "sum"))]
    fn from_csv(path: PathBuf, combiner: &str) -> PyResult<Self> {
        let inner = CohortDataset::read_csv(&path, parse_combiner(combiner)?).map_err(py_err)?;
        Ok(Cohort { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (text, combiner = "sum"))]
    fn from_csv_string(text: &str, combiner: &str) -> PyResult<Self> {
        let inner = CohortDataset::from_csv_str(text, parse_combiner(combiner)?).map_err(py_err)?;
        Ok(Cohort { inner })
    }

    fn to_csv_string(&self) -> PyResult<String> {
        self.inner.to_csv_string().map_err(py_err)
    }

    #[getter]
    fn stages(&self) -> usize {
        self.inner.stages()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn missing_fractions(&self) -> Vec<f64> {
        self.inner.missing_fractions()
    }

    fn history_columns(&self, stage: usize) -> PyResult<Vec<String>> {
        if stage == 0 || stage > self.inner.stages() {
            return Err(PyValueError::new_err(format!(
                "stage must be in 1..={}",
                self.inner.stages()
            )));
        }
        Ok(self.inner.history_columns(stage))
    }

    fn __repr__(&self) -> String {
        format!("Cohort(n={}, stages={})", self.inner.len(), self.inner.stages())
    }
}

#[pyclass(module = "regime_kit")]
struct Simulation {
    inner: SimulatedData,
}

#[pymethods]
impl Simulation {
    #[new]
    #[pyo3(signature = (scenario, n, seed, alpha_ax = None, noiseless = false))]
    fn new(scenario: &str, n: usize, seed: u64, alpha_ax: Option<f64>, noiseless: bool) -> PyResult<Self> {
        let id = ScenarioId::parse(scenario).map_err(py_err)?;
        let mut spec = ScenarioSpec::new(id, n, seed);
        spec.alpha_ax = alpha_ax.or((id == ScenarioId::Sim3).then_some(0.0));
        if noiseless {
            spec = spec.noiseless();
        }
        let inner = simgen::generate_scenario(&spec).map_err(py_err)?;
        Ok(Simulation { inner })
    }

    #[getter]
    fn cohort(&self) -> Cohort {
        Cohort {
            inner: self.inner.cohort.clone(),
        }
    }

    /// The same patients with every covariate observed.
    fn revealed(&self) -> PyResult<Cohort> {
        Ok(Cohort {
            inner: self.inner.revealed().map_err(py_err)?,
        })
    }

    fn true_pseudo_outcomes(&self) -> Vec<f64> {
        self.inner.true_pseudo_outcomes()
    }

    fn pseudo_mse(&self, regime: &Regime) -> Option<f64> {
        self.inner.pseudo_mse(&regime.inner.pseudo_outcomes)
    }

    /// Value and optimal-treatment agreement on a fresh evaluation cohort.
    #[pyo3(signature = (regime, eval_n = 100_000, seed = None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        regime: &Regime,
        eval_n: usize,
        seed: Option<u64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let spec = &self.inner.spec;
        let seed = seed.unwrap_or(spec.seed.wrapping_add(experiment::EVAL_SEED_OFFSET));
        let e = evaluate_regime(spec.scenario, spec.alpha_ax, &regime.inner, eval_n, seed).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("value", e.value)?;
        d.set_item("opt_pct", e.opt_pct)?;
        d.set_item("opt_stage", e.opt_stage)?;
        Ok(d)
    }
}

#[pyclass(module = "regime_kit")]
struct Regime {
    inner: FittedRegime,
}

impl Regime {
    fn stage(&self, stage: usize) -> PyResult<&dtr::StageFit> {
        if stage == 0 || stage > self.inner.stages.len() {
            return Err(PyValueError::new_err(format!(
                "stage must be in 1..={}",
                self.inner.stages.len()
            )));
        }
        Ok(&self.inner.stages[stage - 1])
    }
}

#[pymethods]
impl Regime {
    #[getter]
    fn stages(&self) -> usize {
        self.inner.stages.len()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    /// Estimated stage-1 pseudo-outcomes as `(id, value)` pairs.
    #[getter]
    fn pseudo_outcomes(&self) -> Vec<(usize, f64)> {
        self.inner.pseudo_outcomes.clone()
    }

    /// `+1` or `-1` for a raw stage history.
    fn decide(&self, stage: usize, history: Vec<f64>) -> PyResult<i8> {
        let rule = &self.stage(stage)?.rule;
        if rule.features.iter().any(|&j| j >= history.len()) {
            return Err(PyValueError::new_err("history is shorter than the rule's features"));
        }
        Ok(rule.decide(&history).sign() as i8)
    }

    fn score(&self, stage: usize, history: Vec<f64>) -> PyResult<f64> {
        let rule = &self.stage(stage)?.rule;
        if rule.features.iter().any(|&j| j >= history.len()) {
            return Err(PyValueError::new_err("history is shorter than the rule's features"));
        }
        Ok(rule.score(&history))
    }

    /// `(intercept, {feature: slope})` on the raw history scale.
    fn coefficients(&self, stage: usize) -> PyResult<(f64, Vec<(String, f64)>)> {
        let rule = &self.stage(stage)?.rule;
        let (b0, slopes) = rule.raw_coefficients();
        Ok((b0, rule.feature_names.iter().cloned().zip(slopes).collect()))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("Regime(stages={})", self.inner.stages.len())
    }
}

/// Per-stage `(smoothing, instruments)` column lists.
type StageSplits = Vec<Option<(Vec<String>, Vec<String>)>>;

struct FitOptions {
    flavor: String,
    weight_missing: bool,
    rule_lambda: Option<f64>,
    spline_lambda: Option<f64>,
    balance_grid: Option<Vec<(f64, f64)>>,
    rule_features: Vec<Vec<String>>,
    instruments: StageSplits,
}

fn dtr_config(opts: FitOptions) -> PyResult<DtrConfig> {
    let mut cfg = DtrConfig {
        flavor: parse_flavor(&opts.flavor)?,
        weight_missing: opts.weight_missing,
        rule_penalty: penalty(opts.rule_lambda),
        spline_penalty: penalty(opts.spline_lambda),
        rule_features: opts.rule_features,
        instruments: opts
            .instruments
            .into_iter()
            .map(|s| s.map(|(smoothing, instruments)| InstrumentSplit { smoothing, instruments }))
            .collect(),
        ..Default::default()
    };
    if let Some(g) = opts.balance_grid {
        cfg.balance_grid = g;
    }
    Ok(cfg)
}

/// `rule_features` lists the history columns the rule may use (default: all).
#[pyfunction]
#[pyo3(signature = (cohort, flavor = "ACFBL", rule_lambda = None, spline_lambda = None, balance_grid = None, rule_features = None))]
fn fit_single_stage(
    py: Python<'_>,
    cohort: &Cohort,
    flavor: &str,
    rule_lambda: Option<f64>,
    spline_lambda: Option<f64>,
    balance_grid: Option<Vec<(f64, f64)>>,
    rule_features: Option<Vec<String>>,
) -> PyResult<Regime> {
    let cfg = dtr_config(FitOptions {
        flavor: flavor.to_string(),
        weight_missing: true,
        rule_lambda,
        spline_lambda,
        balance_grid,
        rule_features: rule_features.into_iter().collect(),
        instruments: Vec::new(),
    })?;
    let data = cohort.inner.clone();
    let inner = py
        .detach(move || dtr::fit_single_stage(&data, cfg.flavor, &cfg))
        .map_err(py_err)?;
    Ok(Regime { inner })
}

/// `rule_features` holds one column list per stage; `instruments` holds one
/// `(smoothing, instruments)` pair or `None` per stage.
#[pyfunction]
#[pyo3(signature = (cohort, flavor = "ACFBL", weight_missing = true, rule_lambda = None, spline_lambda = None, balance_grid = None, rule_features = None, instruments = None))]
#[allow(clippy::too_many_arguments)]
fn fit_multistage(
    py: Python<'_>,
    cohort: &Cohort,
    flavor: &str,
    weight_missing: bool,
    rule_lambda: Option<f64>,
    spline_lambda: Option<f64>,
    balance_grid: Option<Vec<(f64, f64)>>,
    rule_features: Option<Vec<Vec<String>>>,
    instruments: Option<StageSplits>,
) -> PyResult<Regime> {
    let cfg = dtr_config(FitOptions {
        flavor: flavor.to_string(),
        weight_missing,
        rule_lambda,
        spline_lambda,
        balance_grid,
        rule_features: rule_features.unwrap_or_default(),
        instruments: instruments.unwrap_or_default(),
    })?;
    let data = cohort.inner.clone();
    let inner = py.detach(move || dtr::fit_multistage(&data, &cfg)).map_err(py_err)?;
    Ok(Regime { inner })
}

/// Parametric Q-learning. Pass per-stage `(main, blip)` formula strings, or
/// a scenario name to use its built-in `model` ("correct"/"incorrect").
#[pyfunction]
#[pyo3(signature = (cohort, formulas = None, scenario = None, model = "incorrect", weighting = "none"))]
fn fit_q_learning(
    py: Python<'_>,
    cohort: &Cohort,
    formulas: Option<Vec<(String, String)>>,
    scenario: Option<&str>,
    model: &str,
    weighting: &str,
) -> PyResult<Regime> {
    let formulas: Vec<QFormula> = match (formulas, scenario) {
        (Some(f), None) => f
            .iter()
            .map(|(m, b)| QFormula::parse(m, b))
            .collect::<Result<_, _>>()
            .map_err(py_err)?,
        (None, Some(s)) => {
            let spec = match model.to_ascii_lowercase().as_str() {
                "correct" => ModelSpec::Correct,
                "incorrect" => ModelSpec::Incorrect,
                other => return Err(PyValueError::new_err(format!("unknown model '{other}'"))),
            };
            builtin_formulas(ScenarioId::parse(s).map_err(py_err)?, spec)
        }
        _ => return Err(PyValueError::new_err("give exactly one of `formulas` and `scenario`")),
    };
    let weighting = match weighting.to_ascii_lowercase().as_str() {
        "none" => MissingWeighting::None,
        "ee" => MissingWeighting::Ee,
        other => return Err(PyValueError::new_err(format!("unknown weighting '{other}'"))),
    };
    let data = cohort.inner.clone();
    let inner = py
        .detach(move || fit_parametric_q_learning(&data, &formulas, weighting, &DtrConfig::default()))
        .map_err(py_err)?;
    Ok(Regime { inner })
}

#[pyfunction]
#[pyo3(signature = (cohort, propensity = None, rule_features = None, rule_lambda = None))]
fn fit_ipw_rule(
    cohort: &Cohort,
    propensity: Option<String>,
    rule_features: Option<Vec<String>>,
    rule_lambda: Option<f64>,
) -> PyResult<Regime> {
    if cohort.inner.stages() != 1 {
        return Err(PyValueError::new_err("the IPW rule needs a single-stage cohort"));
    }
    let cols = cohort.inner.history_columns(1);
    let prop = propensity.unwrap_or_else(|| cols.join(" + "));
    let feats = rule_features.unwrap_or(cols);
    let inner = fit_owl_ipw(&cohort.inner, &prop, &feats, penalty(rule_lambda)).map_err(py_err)?;
    Ok(Regime { inner })
}

#[pyfunction]
fn sobolev_kernel(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    let spec = KernelSpec::second_order(x.len()).map_err(py_err)?;
    kernels::sobolev_kernel(&x, &y, &spec).map_err(py_err)
}

#[pyfunction]
fn gram_matrix(points: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let m = rows_to_matrix(&points)?;
    let spec = KernelSpec::second_order(m.ncols()).map_err(py_err)?;
    let g = kernels::gram_matrix(&m, &spec).map_err(py_err)?;
    Ok((0..g.k.nrows()).map(|i| g.k.row(i).iter().copied().collect()).collect())
}

/// Balancing weights for one arm; `points` must lie in the unit cube.
#[pyfunction]
fn balancing_weights<'py>(
    py: Python<'py>,
    points: Vec<Vec<f64>>,
    in_arm: Vec<bool>,
    lambda_rkhs: f64,
    lambda_weight: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let h = rows_to_matrix(&points)?;
    let spec = KernelSpec::second_order(h.ncols()).map_err(py_err)?;
    let gram = kernels::gram_matrix(&h, &spec).map_err(py_err)?;
    let spectrum = KernelSpectrum::new(&gram).map_err(py_err)?;
    let problem = BalanceProblem {
        histories: &h,
        in_arm: &in_arm,
        spectrum: &spectrum,
        lambda_rkhs,
        lambda_weight,
    };
    let w = solve_weights(&problem).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("weights", w.weights)?;
    d.set_item("objective", w.objective)?;
    d.set_item("converged", w.report.converged)?;
    d.set_item("max_imbalance", w.max_imbalance)?;
    Ok(d)
}

/// The `(λ₁, λ₂)` grid over two inclusive power-of-ten ranges.
#[pyfunction]
fn balance_grid(rkhs_exponents: (i32, i32), weight_exponents: (i32, i32)) -> Vec<(f64, f64)> {
    lambda_grid(
        rkhs_exponents.0..=rkhs_exponents.1,
        weight_exponents.0..=weight_exponents.1,
    )
}

/// Runs a simulation experiment config; returns the results path and the
/// number of failed rows.
#[pyfunction]
#[pyo3(signature = (config_path, jobs = 1, seed = None, out_dir = None))]
fn run_experiment(
    py: Python<'_>,
    config_path: PathBuf,
    jobs: usize,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
) -> PyResult<(String, usize)> {
    let text = std::fs::read_to_string(&config_path).map_err(|e| PyOSError::new_err(e.to_string()))?;
    let cfg = ExperimentConfig::from_toml_str(&text).map_err(py_err)?;
    let opts = RunOptions { jobs, seed, out_dir };
    let report = py
        .detach(move || experiment::run_simulation(&cfg, &text, &opts))
        .map_err(py_err)?;
    Ok((report.results_path.display().to_string(), report.failed))
}

/// Per-method summary rows of a results file, as dictionaries.
#[pyfunction]
fn summarize<'py>(py: Python<'py>, results_path: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = experiment::read_results(Path::new(&results_path)).map_err(py_err)?;
    experiment::summarize(&rows)
        .into_iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("scenario", s.scenario)?;
            d.set_item("method", s.method)?;
            d.set_item("n", s.n)?;
            d.set_item("n_ok", s.n_ok)?;
            d.set_item("n_failed", s.n_failed)?;
            d.set_item("value_mean", s.value_mean)?;
            d.set_item("value_sd", s.value_sd)?;
            d.set_item("opt_pct_mean", s.opt_pct_mean)?;
            d.set_item("opt_pct_sd", s.opt_pct_sd)?;
            d.set_item("opt_stage1_mean", s.opt_stage1_mean)?;
            d.set_item("opt_stage2_mean", s.opt_stage2_mean)?;
            d.set_item("pseudo_mse_mean", s.pseudo_mse_mean)?;
            d.set_item("single_replication", s.single_replication)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
#[pyo3(name = "regime_kit")]
fn py_regime_kit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Cohort>()?;
    m.add_class::<Simulation>()?;
    m.add_class::<Regime>()?;
    m.add_function(wrap_pyfunction!(fit_single_stage, m)?)?;
    m.add_function(wrap_pyfunction!(fit_multistage, m)?)?;
    m.add_function(wrap_pyfunction!(fit_q_learning, m)?)?;
    m.add_function(wrap_pyfunction!(fit_ipw_rule, m)?)?;
    m.add_function(wrap_pyfunction!(sobolev_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(gram_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(balancing_weights, m)?)?;
    m.add_function(wrap_pyfunction!(balance_grid, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    Ok(())
}
