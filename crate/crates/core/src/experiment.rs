//! Config-driven replication runner: method dispatch, result files, run
//! manifest and per-method summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balancing::lambda_grid;
use crate::baselines::{
    builtin_formulas, fit_owl_ipw, fit_parametric_q_learning, MissingWeighting, ModelSpec, QFormula,
};
use crate::data_model::{CohortDataset, Combiner};
use crate::dtr::{fit_multistage, fit_single_stage, DtrConfig, FittedRegime, InstrumentSplit};
use crate::error::{RegimeError, Result};
use crate::missingness::GammaFamily;
use crate::qreg::Penalty;
use crate::simgen::{evaluate_on_draws, evaluate_regime, generate_scenario, ScenarioId, ScenarioSpec, SimulatedData};
use crate::value::Flavor;

/// Added to a replication's seed to draw its evaluation cohort.
pub const EVAL_SEED_OFFSET: u64 = 1_000_003;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSection,
    pub methods: MethodsSection,
    #[serde(default)]
    pub tuning: TuningSection,
    /// Keyed `stage1`, `stage2`, ...
    #[serde(default)]
    pub instruments: BTreeMap<String, InstrumentSplit>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// `SIM1`, `SIM2` or `SIM3`; omitted when `cohort_file` is given.
    pub name: Option<String>,
    pub cohort_file: Option<PathBuf>,
    #[serde(default)]
    pub combiner: Combiner,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub alpha_ax: Option<f64>,
    #[serde(default = "default_eval_n")]
    pub eval_n: usize,
    #[serde(default)]
    pub noiseless: bool,
}

fn default_n() -> usize {
    500
}
fn default_reps() -> usize {
    1
}
fn default_seed() -> u64 {
    1
}
fn default_eval_n() -> usize {
    100_000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormulaSpec {
    pub main: String,
    pub blip: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodsSection {
    pub names: Vec<String>,
    /// Per-stage Q-learning formulas for external cohorts; the simulation
    /// scenarios have built-in ones.
    #[serde(default)]
    pub correct: Vec<FormulaSpec>,
    #[serde(default)]
    pub incorrect: Vec<FormulaSpec>,
    /// Logistic propensity terms for the IPW rule, e.g. `"X1_1^2 + X1_2"`
    /// (default: every stage-1 column, linearly).
    pub owl_propensity: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PenaltySetting {
    Value(f64),
    Word(String),
}

impl Default for PenaltySetting {
    fn default() -> Self {
        PenaltySetting::Word("auto".into())
    }
}

impl PenaltySetting {
    fn resolve(&self, field: &str) -> Result<Penalty> {
        match self {
            PenaltySetting::Value(v) if *v > 0.0 && v.is_finite() => Ok(Penalty::Fixed(*v)),
            PenaltySetting::Word(w) if w.eq_ignore_ascii_case("auto") => Ok(Penalty::Auto),
            other => Err(RegimeError::Config(format!(
                "tuning.{field}: expected \"auto\" or a positive number, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningSection {
    /// Inclusive power-of-ten range for the RKHS penalty.
    #[serde(default = "default_rkhs_exponents")]
    pub balance_rkhs_exponents: [i32; 2],
    #[serde(default = "default_weight_exponents")]
    pub balance_weight_exponents: [i32; 2],
    /// Explicit `(λ₁, λ₂)` pairs; overrides the exponent ranges.
    pub balance_grid: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub spline_lambda: PenaltySetting,
    #[serde(default)]
    pub rule_lambda: PenaltySetting,
    #[serde(default = "default_family")]
    pub gamma_family: String,
    #[serde(default = "default_gamma0")]
    pub gamma0: Vec<f64>,
    #[serde(default)]
    pub rule_features: Vec<Vec<String>>,
}

fn default_rkhs_exponents() -> [i32; 2] {
    [-8, -3]
}
fn default_weight_exponents() -> [i32; 2] {
    [-4, 1]
}
fn default_family() -> String {
    "linear".into()
}
fn default_gamma0() -> Vec<f64> {
    vec![1.0]
}

impl Default for TuningSection {
    fn default() -> Self {
        TuningSection {
            balance_rkhs_exponents: default_rkhs_exponents(),
            balance_weight_exponents: default_weight_exponents(),
            balance_grid: None,
            spline_lambda: PenaltySetting::default(),
            rule_lambda: PenaltySetting::default(),
            gamma_family: default_family(),
            gamma0: default_gamma0(),
            rule_features: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: default_out() }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| RegimeError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        if s.name.is_none() == s.cohort_file.is_none() {
            return Err(RegimeError::Config(
                "scenario: exactly one of `name` and `cohort_file` must be set".into(),
            ));
        }
        if let Some(name) = &s.name {
            ScenarioId::parse(name)?;
        }
        if s.replications == 0 {
            return Err(RegimeError::Config("scenario.replications must be at least 1".into()));
        }
        if s.eval_n == 0 {
            return Err(RegimeError::Config("scenario.eval_n must be at least 1".into()));
        }
        if self.methods.names.is_empty() {
            return Err(RegimeError::Config("methods.names is empty".into()));
        }
        for m in &self.methods.names {
            Method::parse(m)?;
        }
        for key in self.instruments.keys() {
            stage_key(key)?;
        }
        self.dtr_config()?;
        self.formulas(ModelSpec::Correct)?;
        self.formulas(ModelSpec::Incorrect)?;
        Ok(())
    }

    pub fn scenario_id(&self) -> Option<ScenarioId> {
        self.scenario
            .name
            .as_deref()
            .map(|n| ScenarioId::parse(n).expect("validated"))
    }

    pub fn dtr_config(&self) -> Result<DtrConfig> {
        let t = &self.tuning;
        let grid = match &t.balance_grid {
            Some(g) => {
                if g.is_empty() || g.iter().any(|p| !(p[0] > 0.0 && p[1] > 0.0)) {
                    return Err(RegimeError::Config("tuning.balance_grid needs positive pairs".into()));
                }
                g.iter().map(|p| (p[0], p[1])).collect()
            }
            None => {
                let [a0, a1] = t.balance_rkhs_exponents;
                let [b0, b1] = t.balance_weight_exponents;
                if a0 > a1 || b0 > b1 {
                    return Err(RegimeError::Config("tuning: exponent ranges must be ascending".into()));
                }
                lambda_grid(a0..=a1, b0..=b1)
            }
        };
        let family = GammaFamily::parse(&t.gamma_family)?;
        if t.gamma0.len() != family.dim() {
            return Err(RegimeError::Config(format!(
                "tuning.gamma0 has {} entries, family '{}' needs {}",
                t.gamma0.len(),
                t.gamma_family,
                family.dim()
            )));
        }
        let stages = self
            .instruments
            .keys()
            .map(|k| stage_key(k))
            .collect::<Result<Vec<_>>>()?;
        let mut instruments = vec![None; stages.iter().copied().max().unwrap_or(0)];
        for (k, split) in &self.instruments {
            instruments[stage_key(k)? - 1] = Some(split.clone());
        }
        Ok(DtrConfig {
            flavor: Flavor::Abw,
            balance_grid: grid,
            spline_penalty: t.spline_lambda.resolve("spline_lambda")?,
            rule_penalty: t.rule_lambda.resolve("rule_lambda")?,
            rule_features: t.rule_features.clone(),
            instruments,
            weight_missing: true,
            gamma_family: family,
            gamma0: t.gamma0.clone(),
        })
    }

    fn formulas(&self, spec: ModelSpec) -> Result<Option<Vec<QFormula>>> {
        let given = match spec {
            ModelSpec::Correct => &self.methods.correct,
            ModelSpec::Incorrect => &self.methods.incorrect,
        };
        if !given.is_empty() {
            return given
                .iter()
                .map(|f| QFormula::parse(&f.main, &f.blip))
                .collect::<Result<_>>()
                .map(Some);
        }
        Ok(self.scenario_id().map(|s| builtin_formulas(s, spec)))
    }
}

fn stage_key(key: &str) -> Result<usize> {
    key.strip_prefix("stage")
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .ok_or_else(|| RegimeError::Config(format!("instruments: section key '{key}' must look like stage1")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataMode {
    /// Observed cohort, pseudo-outcome responders weighted 1.
    CompleteCase,
    /// Observed cohort, responders weighted by `1/π̂`.
    Ee,
    /// Every covariate revealed (simulation only).
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    Cfbl,
    Acfbl,
    Ql(ModelSpec),
    Owl,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Method {
    pub label: String,
    pub data: DataMode,
    pub estimator: Estimator,
}

impl Method {
    /// Parses labels such as `CC-ACFBL`, `EE-QL(I)` or `All-QL(C)`.
    pub fn parse(label: &str) -> Result<Self> {
        let bad = || RegimeError::Config(format!("unknown method '{label}'"));
        let (prefix, body) = label.split_once('-').ok_or_else(bad)?;
        let data = match prefix.to_ascii_uppercase().as_str() {
            "CC" => DataMode::CompleteCase,
            "EE" => DataMode::Ee,
            "ALL" => DataMode::All,
            _ => return Err(bad()),
        };
        let estimator = match body.to_ascii_uppercase().as_str() {
            "CFBL" => Estimator::Cfbl,
            "ACFBL" => Estimator::Acfbl,
            "QL(I)" => Estimator::Ql(ModelSpec::Incorrect),
            "QL(C)" => Estimator::Ql(ModelSpec::Correct),
            "OWL" => Estimator::Owl,
            _ => return Err(bad()),
        };
        if estimator == Estimator::Owl && data != DataMode::CompleteCase {
            return Err(RegimeError::Config(format!(
                "'{label}': the IPW rule is complete-case only"
            )));
        }
        Ok(Method {
            label: label.to_string(),
            data,
            estimator,
        })
    }
}

/// Either a generated replication (with its hidden truth) or an external
/// cohort.
pub enum DataSource<'a> {
    Simulated(&'a SimulatedData),
    External(&'a CohortDataset),
}

pub fn fit_method(method: &Method, source: &DataSource<'_>, config: &ExperimentConfig) -> Result<FittedRegime> {
    let revealed;
    let cohort = match (source, method.data) {
        (DataSource::Simulated(d), DataMode::All) => {
            revealed = d.revealed()?;
            &revealed
        }
        (DataSource::Simulated(d), _) => &d.cohort,
        (DataSource::External(_), DataMode::All) => {
            return Err(RegimeError::Config(format!(
                "'{}' needs fully observed covariates, only available for simulated scenarios",
                method.label
            )))
        }
        (DataSource::External(c), _) => *c,
    };
    let mut dtr = config.dtr_config()?;
    dtr.weight_missing = method.data == DataMode::Ee;
    match method.estimator {
        Estimator::Cfbl | Estimator::Acfbl => {
            let flavor = if method.estimator == Estimator::Cfbl {
                Flavor::Bw
            } else {
                Flavor::Abw
            };
            if cohort.stages() == 1 {
                fit_single_stage(cohort, flavor, &dtr)
            } else {
                dtr.flavor = flavor;
                fit_multistage(cohort, &dtr)
            }
        }
        Estimator::Ql(spec) => {
            let formulas = config.formulas(spec)?.ok_or_else(|| {
                RegimeError::Config(format!("'{}' needs Q-model formulas in [methods]", method.label))
            })?;
            let weighting = if method.data == DataMode::Ee {
                MissingWeighting::Ee
            } else {
                MissingWeighting::None
            };
            fit_parametric_q_learning(cohort, &formulas, weighting, &dtr)
        }
        Estimator::Owl => {
            let cols = cohort.history_columns(1);
            let prop = config
                .methods
                .owl_propensity
                .clone()
                .unwrap_or_else(|| cols.join(" + "));
            let feats = match dtr.rule_features.first() {
                Some(f) if !f.is_empty() => f.clone(),
                _ => cols,
            };
            fit_owl_ipw(cohort, &prop, &feats, dtr.rule_penalty)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub method: String,
    pub n: usize,
    pub replication: usize,
    pub seed: u64,
    pub value: Option<f64>,
    /// Mean potential outcome under the rule over the training patients.
    pub value_in_sample: Option<f64>,
    pub opt_pct: Option<f64>,
    pub opt_stage1: Option<f64>,
    pub opt_stage2: Option<f64>,
    pub pseudo_mse: Option<f64>,
    pub error: String,
}

impl ResultRow {
    pub fn failed(&self) -> bool {
        !self.error.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub replication: usize,
    pub seconds: f64,
}

pub fn replication_seed(base: u64, replication: usize) -> u64 {
    base.wrapping_add(replication as u64)
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".into()
    }
}

fn run_one(
    method: &Method,
    data: &SimulatedData,
    config: &ExperimentConfig,
    replication: usize,
) -> (ResultRow, TimingRow) {
    let spec = &data.spec;
    let start = Instant::now();
    let mut row = ResultRow {
        scenario: spec.scenario.name().to_string(),
        method: method.label.clone(),
        n: spec.n,
        replication,
        seed: spec.seed,
        value: None,
        value_in_sample: None,
        opt_pct: None,
        opt_stage1: None,
        opt_stage2: None,
        pseudo_mse: None,
        error: String::new(),
    };
    let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<()> {
        let regime = fit_method(method, &DataSource::Simulated(data), config)?;
        let eval = evaluate_regime(
            spec.scenario,
            spec.alpha_ax,
            &regime,
            config.scenario.eval_n,
            spec.seed.wrapping_add(EVAL_SEED_OFFSET),
        )?;
        let in_sample = evaluate_on_draws(spec.scenario, &data.draws, &regime);
        row.value = Some(eval.value);
        row.value_in_sample = Some(in_sample.value);
        row.opt_pct = Some(eval.opt_pct);
        row.opt_stage1 = eval.opt_stage.first().copied();
        row.opt_stage2 = eval.opt_stage.get(1).copied();
        row.pseudo_mse = data.pseudo_mse(&regime.pseudo_outcomes);
        Ok(())
    }));
    match outcome {
        Ok(Ok(())) => {}
        Ok(Err(e)) => row.error = e.to_string(),
        Err(p) => row.error = format!("panic: {}", panic_message(p)),
    }
    let timing = TimingRow {
        method: method.label.clone(),
        replication,
        seconds: start.elapsed().as_secs_f64(),
    };
    (row, timing)
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub jobs: usize,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub rows: Vec<ResultRow>,
    pub timings: Vec<TimingRow>,
    pub results_path: PathBuf,
    pub failed: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'a str,
    version: &'a str,
    config_sha256: String,
    scenario: &'a str,
    n: usize,
    replications: usize,
    base_seed: u64,
    seeds: Vec<u64>,
    eval_seeds: Vec<u64>,
    eval_n: usize,
    methods: &'a [String],
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs every method on every replication of a simulated scenario and writes
/// `results.csv`, `timings.csv` and `manifest.json` to the output directory.
/// Rows are in replication order, methods in configured order.
pub fn run_simulation(config: &ExperimentConfig, config_text: &str, opts: &RunOptions) -> Result<RunReport> {
    let scenario = config
        .scenario_id()
        .ok_or_else(|| RegimeError::Config("simulate needs scenario.name".into()))?;
    let methods: Vec<Method> = config
        .methods
        .names
        .iter()
        .map(|m| Method::parse(m))
        .collect::<Result<_>>()?;
    for m in &methods {
        if m.estimator == Estimator::Owl && scenario.stages() != 1 {
            return Err(RegimeError::Config(format!("'{}' is single-stage only", m.label)));
        }
    }
    let base = opts.seed.unwrap_or(config.scenario.seed);
    let reps = config.scenario.replications;
    let seeds: Vec<u64> = (0..reps).map(|r| replication_seed(base, r)).collect();
    let make_spec = |seed: u64| {
        let mut spec = ScenarioSpec::new(scenario, config.scenario.n, seed);
        spec.alpha_ax = config
            .scenario
            .alpha_ax
            .or((scenario == ScenarioId::Sim3).then_some(0.0));
        if config.scenario.noiseless {
            spec = spec.noiseless();
        }
        spec
    };
    make_spec(base).validate()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| RegimeError::Config(format!("cannot start worker pool: {e}")))?;
    let per_rep: Vec<Vec<(ResultRow, TimingRow)>> = pool.install(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(r, &seed)| match generate_scenario(&make_spec(seed)) {
                Ok(data) => methods.iter().map(|m| run_one(m, &data, config, r)).collect(),
                Err(e) => methods
                    .iter()
                    .map(|m| {
                        let row = ResultRow {
                            scenario: scenario.name().to_string(),
                            method: m.label.clone(),
                            n: config.scenario.n,
                            replication: r,
                            seed,
                            value: None,
                            value_in_sample: None,
                            opt_pct: None,
                            opt_stage1: None,
                            opt_stage2: None,
                            pseudo_mse: None,
                            error: e.to_string(),
                        };
                        let t = TimingRow {
                            method: m.label.clone(),
                            replication: r,
                            seconds: 0.0,
                        };
                        (row, t)
                    })
                    .collect(),
            })
            .collect()
    });
    let (rows, timings): (Vec<_>, Vec<_>) = per_rep.into_iter().flatten().unzip();

    let dir = opts.out_dir.clone().unwrap_or_else(|| config.output.dir.clone());
    fs::create_dir_all(&dir)?;
    let results_path = dir.join("results.csv");
    write_csv(&results_path, &rows)?;
    write_csv(&dir.join("timings.csv"), &timings)?;
    let manifest = Manifest {
        tool: "regime-kit",
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: sha256_hex(config_text.as_bytes()),
        scenario: scenario.name(),
        n: config.scenario.n,
        replications: reps,
        base_seed: base,
        eval_seeds: seeds.iter().map(|s| s.wrapping_add(EVAL_SEED_OFFSET)).collect(),
        seeds,
        eval_n: config.scenario.eval_n,
        methods: &config.methods.names,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| RegimeError::Data(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    let failed = rows.iter().filter(|r| r.failed()).count();
    Ok(RunReport {
        rows,
        timings,
        results_path,
        failed,
    })
}

#[derive(Serialize)]
struct FitOutput<'a> {
    method: &'a str,
    regime: &'a FittedRegime,
}

/// Fits every configured method once on a single dataset (the cohort file,
/// or one generated replication) and writes `regime_<method>.json` files.
pub fn run_fit(config: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<(String, Result<PathBuf>)>> {
    let dir = opts.out_dir.clone().unwrap_or_else(|| config.output.dir.clone());
    fs::create_dir_all(&dir)?;
    let simulated;
    let external;
    let source = match (&config.scenario.cohort_file, config.scenario_id()) {
        (Some(path), _) => {
            external = CohortDataset::read_csv(path, config.scenario.combiner)?;
            DataSource::External(&external)
        }
        (None, Some(id)) => {
            let mut spec = ScenarioSpec::new(id, config.scenario.n, opts.seed.unwrap_or(config.scenario.seed));
            spec.alpha_ax = config.scenario.alpha_ax.or((id == ScenarioId::Sim3).then_some(0.0));
            if config.scenario.noiseless {
                spec = spec.noiseless();
            }
            simulated = generate_scenario(&spec)?;
            DataSource::Simulated(&simulated)
        }
        (None, None) => unreachable!("validated config"),
    };
    let mut out = Vec::new();
    for name in &config.methods.names {
        let method = Method::parse(name)?;
        let res = fit_method(&method, &source, config).and_then(|regime| {
            let path = dir.join(format!("regime_{}.json", file_stem(name)));
            let json = serde_json::to_string_pretty(&FitOutput {
                method: name,
                regime: &regime,
            })
            .map_err(|e| RegimeError::Data(e.to_string()))?;
            fs::write(&path, json + "\n")?;
            Ok(path)
        });
        out.push((name.clone(), res));
    }
    Ok(out)
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .filter_map(|c| match c {
            'a'..='z' | 'A'..='Z' | '0'..='9' | '-' => Some(c),
            '(' => Some('_'),
            _ => None,
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(RegimeError::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: String,
    pub n: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    pub value_mean: Option<f64>,
    pub value_sd: Option<f64>,
    pub opt_pct_mean: Option<f64>,
    pub opt_pct_sd: Option<f64>,
    pub opt_stage1_mean: Option<f64>,
    pub opt_stage1_sd: Option<f64>,
    pub opt_stage2_mean: Option<f64>,
    pub opt_stage2_sd: Option<f64>,
    pub pseudo_mse_mean: Option<f64>,
    pub pseudo_mse_sd: Option<f64>,
    /// Set when only one replication succeeded, so the spreads are 0.
    pub single_replication: bool,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Some((mean, (ss / (n - 1.0)).sqrt()))
}

/// Per (scenario, method, n) moments over successful rows, in order of
/// first appearance.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String, usize)> = Vec::new();
    let mut groups: BTreeMap<(String, String, usize), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.scenario.clone(), r.method.clone(), r.n);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let ok: Vec<&&ResultRow> = g.iter().filter(|r| !r.failed()).collect();
            let col = |f: fn(&ResultRow) -> Option<f64>| {
                let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                mean_sd(&v)
            };
            let value = col(|r| r.value);
            let opt = col(|r| r.opt_pct);
            let s1 = col(|r| r.opt_stage1);
            let s2 = col(|r| r.opt_stage2);
            let mse = col(|r| r.pseudo_mse);
            SummaryRow {
                scenario: key.0,
                method: key.1,
                n: key.2,
                n_ok: ok.len(),
                n_failed: g.len() - ok.len(),
                value_mean: value.map(|m| m.0),
                value_sd: value.map(|m| m.1),
                opt_pct_mean: opt.map(|m| m.0),
                opt_pct_sd: opt.map(|m| m.1),
                opt_stage1_mean: s1.map(|m| m.0),
                opt_stage1_sd: s1.map(|m| m.1),
                opt_stage2_mean: s2.map(|m| m.0),
                opt_stage2_sd: s2.map(|m| m.1),
                pseudo_mse_mean: mse.map(|m| m.0),
                pseudo_mse_sd: mse.map(|m| m.1),
                single_replication: ok.len() == 1,
            }
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_csv(path, rows)
}

/// Fixed-width table with `mean (sd)` cells.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let cell = |m: Option<f64>, s: Option<f64>| match (m, s) {
        (Some(m), Some(s)) => format!("{m:.3} ({s:.3})"),
        _ => "-".to_string(),
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:<12} {:>6} {:>4} {:>6} {:>16} {:>16} {:>16} {:>16} {:>16}",
        "scen", "method", "n", "ok", "failed", "value", "opt%", "opt% stage 1", "opt% stage 2", "pseudo MSE"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<6} {:<12} {:>6} {:>4} {:>6} {:>16} {:>16} {:>16} {:>16} {:>16}{}",
            r.scenario,
            r.method,
            r.n,
            r.n_ok,
            r.n_failed,
            cell(r.value_mean, r.value_sd),
            cell(r.opt_pct_mean, r.opt_pct_sd),
            cell(r.opt_stage1_mean, r.opt_stage1_sd),
            cell(r.opt_stage2_mean, r.opt_stage2_sd),
            cell(r.pseudo_mse_mean, r.pseudo_mse_sd),
            if r.single_replication {
                "  [single replication]"
            } else {
                ""
            }
        );
    }
    out
}
