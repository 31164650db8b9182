//! Single-stage (augmented) balancing learners and multi-stage backward
//! induction with missingness-weighted pseudo-outcomes.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::balancing::{default_lambda_grid, merge_arms, tune_balance_params, KernelSpectrum};
use crate::data_model::{build_stage_sample, rescale_covariates, Arm, CohortDataset, StageSample};
use crate::error::{RegimeError, Result};
use crate::kernels::{gram_matrix, KernelSpec};
use crate::missingness::{estimate_gamma_gmm, GammaFamily, GmmReport, MissingnessRows};
use crate::qreg::{build_pseudo_outcome, fit_weighted_spline, ArmModels, Penalty};
use crate::rule_search::{fit_rule, DecisionRule};
use crate::simgen::Policy;
use crate::value::{build_omega, ArmPredictions, Flavor};

/// Which history columns feed the missingness model at one stage. `A{t}`
/// names the stage's own treatment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentSplit {
    pub smoothing: Vec<String>,
    pub instruments: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DtrConfig {
    pub flavor: Flavor,
    pub balance_grid: Vec<(f64, f64)>,
    pub spline_penalty: Penalty,
    pub rule_penalty: Penalty,
    /// Rule features per stage (1-based stage `t` at index `t - 1`); an
    /// empty list means every history column.
    pub rule_features: Vec<Vec<String>>,
    /// Missingness model inputs per stage; `None` uses every history column
    /// for smoothing and the treatment as the instrument.
    pub instruments: Vec<Option<InstrumentSplit>>,
    /// Estimate `π̂` for missing pseudo-outcomes; otherwise responders get
    /// weight 1.
    pub weight_missing: bool,
    pub gamma_family: GammaFamily,
    pub gamma0: Vec<f64>,
}

impl Default for DtrConfig {
    fn default() -> Self {
        DtrConfig {
            flavor: Flavor::Abw,
            balance_grid: default_lambda_grid(),
            spline_penalty: Penalty::Auto,
            rule_penalty: Penalty::Auto,
            rule_features: Vec::new(),
            instruments: Vec::new(),
            weight_missing: true,
            gamma_family: GammaFamily::Linear,
            gamma0: vec![1.0],
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StageDiagnostics {
    pub sample_size: usize,
    /// `(λ₁, λ₂)` chosen for the +1 and -1 arms.
    pub balance_lambdas: Option<[(f64, f64); 2]>,
    pub balance_converged: Option<bool>,
    pub max_imbalance: Option<f64>,
    pub spline_lambdas: Option<[f64; 2]>,
    /// Parametric Q-model coefficients (main terms, then blip terms).
    pub coefficients: Option<Vec<f64>>,
    pub rank_deficient: bool,
    pub clipped_propensities: usize,
    pub gmm: Option<GmmReport>,
    pub gamma: Option<Vec<f64>>,
    pub propensity_floor_count: usize,
    /// Fraction of rows with an available pseudo-outcome.
    pub pseudo_coverage: f64,
    pub rule_lambda: f64,
    pub rule_note: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageFit {
    pub stage: usize,
    pub rule: DecisionRule,
    pub diagnostics: StageDiagnostics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FittedRegime {
    pub stages: Vec<StageFit>,
    /// Estimated stage-1 pseudo-outcomes `(id, value)` (multi-stage only).
    pub pseudo_outcomes: Vec<(usize, f64)>,
    pub warnings: Vec<String>,
}

impl FittedRegime {
    pub fn rule(&self, stage: usize) -> &DecisionRule {
        &self.stages[stage - 1].rule
    }
}

impl Policy for FittedRegime {
    fn decide(&self, stage: usize, history: &[f64]) -> Arm {
        self.rule(stage).decide(history)
    }
}

fn resolve_columns(sample: &StageSample, names: &[String]) -> Result<Vec<usize>> {
    names.iter().map(|n| sample.column_index(n)).collect()
}

/// Column of `(h_t, a_t)` by name, treating `A{t}` as the treatment.
pub(crate) fn named_column(sample: &StageSample, name: &str) -> Result<Vec<f64>> {
    if name == format!("A{}", sample.stage) {
        return Ok(sample.treatments.iter().map(|a| a.sign()).collect());
    }
    let j = sample.column_index(name)?;
    Ok(sample.histories.column(j).iter().copied().collect())
}

pub(crate) fn column_block(sample: &StageSample, names: &[String]) -> Result<DMatrix<f64>> {
    let cols: Vec<Vec<f64>> = names.iter().map(|n| named_column(sample, n)).collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(sample.len(), names.len(), |i, j| cols[j][i]))
}

fn default_split(sample: &StageSample) -> InstrumentSplit {
    InstrumentSplit {
        smoothing: sample.columns.clone(),
        instruments: vec![format!("A{}", sample.stage)],
    }
}

pub(crate) struct PropensityEstimate {
    pub propensity: Vec<Option<f64>>,
    pub gmm: Option<GmmReport>,
    pub gamma: Option<Vec<f64>>,
    pub floor_count: usize,
}

/// `π̂` for responders (1 when nothing is missing or weighting is off).
pub(crate) fn estimate_propensities(
    raw: &StageSample,
    pseudo: &[Option<f64>],
    config: &DtrConfig,
    warnings: &mut Vec<String>,
) -> Result<PropensityEstimate> {
    let stage = raw.stage;
    let mut out = PropensityEstimate {
        propensity: pseudo.iter().map(|p| p.map(|_| 1.0)).collect(),
        gmm: None,
        gamma: None,
        floor_count: 0,
    };
    if !config.weight_missing || pseudo.iter().all(Option::is_some) {
        return Ok(out);
    }
    let split = config
        .instruments
        .get(stage - 1)
        .cloned()
        .flatten()
        .unwrap_or_else(|| default_split(raw));
    let rows = MissingnessRows {
        u: column_block(raw, &split.smoothing)?,
        z: column_block(raw, &split.instruments)?,
        y: pseudo.to_vec(),
        r: pseudo.iter().map(Option::is_some).collect(),
    };
    let model = estimate_gamma_gmm(&rows, config.gamma_family, &config.gamma0, None)?;
    if !model.report.converged {
        warnings.push(format!("stage {stage}: GMM search did not converge"));
    }
    let (p, floored) = model.training_propensities();
    out.propensity = p;
    out.floor_count = floored;
    out.gamma = Some(model.gamma.clone());
    out.gmm = Some(model.report);
    Ok(out)
}

struct StageOutput {
    fit: StageFit,
    /// `Q̂_t(h_t, d̂_t(h_t))` by trajectory id.
    next_pseudo: BTreeMap<usize, f64>,
    stage_pseudo: Vec<(usize, f64)>,
}

fn fit_stage(
    cohort: &CohortDataset,
    stage: usize,
    config: &DtrConfig,
    later: Option<&BTreeMap<usize, f64>>,
    need_models: bool,
    warnings: &mut Vec<String>,
) -> Result<StageOutput> {
    let raw = build_stage_sample(cohort, stage)?;
    if raw.is_empty() {
        return Err(RegimeError::Data(format!(
            "stage {stage} complete-case sample is empty"
        )));
    }
    let pseudo: Vec<Option<f64>> = match later {
        None => raw.pseudo_outcomes.clone(),
        Some(map) => raw.ids.iter().map(|id| map.get(id).copied()).collect(),
    };
    for (i, p) in pseudo.iter().enumerate() {
        if p.is_some() != raw.responded[i] {
            return Err(RegimeError::Data(format!(
                "stage {stage}: pseudo-outcome availability disagrees with next-stage missingness for id {}",
                raw.ids[i]
            )));
        }
    }
    let raw = raw.with_pseudo_outcomes(pseudo.clone())?;
    let scaled = rescale_covariates(&raw)?;
    let n = raw.len();
    let spec = KernelSpec::second_order(raw.histories.ncols())?;

    let gram = gram_matrix(&scaled.histories, &spec)?;
    let spectrum = KernelSpectrum::new(&gram)?;
    let in_plus = raw.arm_indicator(Arm::Plus);
    let in_minus = raw.arm_indicator(Arm::Minus);
    if !in_plus.iter().any(|&b| b) || !in_minus.iter().any(|&b| b) {
        return Err(RegimeError::Data(format!("stage {stage}: one treatment arm is empty")));
    }
    let bal_plus = tune_balance_params(&scaled.histories, &in_plus, &spectrum, &config.balance_grid)?;
    let bal_minus = tune_balance_params(&scaled.histories, &in_minus, &spectrum, &config.balance_grid)?;
    for (arm, b) in [("+1", &bal_plus), ("-1", &bal_minus)] {
        if let Some(w) = &b.weights.report.warning {
            warnings.push(format!("stage {stage} arm {arm}: {w}"));
        }
    }
    let weights = merge_arms(&in_plus, &bal_plus.weights.weights, &bal_minus.weights.weights);

    let est = estimate_propensities(&raw, &pseudo, config, warnings)?;
    let (propensity, gmm, gamma, floor_count) = (est.propensity, est.gmm, est.gamma, est.floor_count);
    let miss_weight: Vec<f64> = propensity.iter().map(|p| p.map_or(0.0, |v| 1.0 / v)).collect();

    let fit_models = config.flavor == Flavor::Abw || need_models;
    let models = if fit_models {
        let responses: Vec<f64> = pseudo.iter().map(|p| p.unwrap_or(0.0)).collect();
        let fit_arm = |arm: Arm, member: &[bool]| {
            let cw: Vec<f64> = (0..n).map(|i| if member[i] { miss_weight[i] } else { 0.0 }).collect();
            fit_weighted_spline(arm, &scaled.histories, &responses, &cw, &spec, config.spline_penalty)
        };
        Some(ArmModels {
            plus: fit_arm(Arm::Plus, &in_plus)?,
            minus: fit_arm(Arm::Minus, &in_minus)?,
        })
    } else {
        None
    };

    let predictions = match (&models, config.flavor) {
        (Some(m), Flavor::Abw) => Some(ArmPredictions::from_models(m, &scaled.histories)),
        _ => None,
    };
    let omega = build_omega(
        &raw.treatments,
        &weights,
        &pseudo,
        predictions.as_ref(),
        Some(&miss_weight),
    )?;

    let names: Vec<String> = match config.rule_features.get(stage - 1) {
        Some(f) if !f.is_empty() => f.clone(),
        _ => raw.columns.clone(),
    };
    let features = resolve_columns(&raw, &names)?;
    let rule_fit = fit_rule(&omega, &raw.histories, &features, &names, config.rule_penalty)?;
    if let Some(d) = &rule_fit.diagnostic {
        warnings.push(format!("stage {stage} rule: {d}"));
    }

    let mut next_pseudo = BTreeMap::new();
    if let Some(m) = &models {
        let all = vec![true; n];
        let values = build_pseudo_outcome(m, &rule_fit.rule, &raw.histories, &scaled.histories, &all);
        for (id, v) in raw.ids.iter().zip(values) {
            next_pseudo.insert(*id, v.expect("every row requested"));
        }
    }
    let stage_pseudo = raw
        .ids
        .iter()
        .zip(&pseudo)
        .filter_map(|(id, p)| p.map(|v| (*id, v)))
        .collect();

    let diagnostics = StageDiagnostics {
        sample_size: n,
        balance_lambdas: Some([
            (bal_plus.lambda_rkhs, bal_plus.lambda_weight),
            (bal_minus.lambda_rkhs, bal_minus.lambda_weight),
        ]),
        balance_converged: Some(bal_plus.weights.report.converged && bal_minus.weights.report.converged),
        max_imbalance: Some(bal_plus.weights.max_imbalance.max(bal_minus.weights.max_imbalance)),
        spline_lambdas: models.as_ref().map(|m| [m.plus.lambda, m.minus.lambda]),
        gmm,
        gamma,
        propensity_floor_count: floor_count,
        pseudo_coverage: raw.responded.iter().filter(|&&r| r).count() as f64 / n as f64,
        rule_lambda: rule_fit.rule.lambda,
        rule_note: rule_fit.diagnostic.clone(),
        ..Default::default()
    };
    Ok(StageOutput {
        fit: StageFit {
            stage,
            rule: rule_fit.rule,
            diagnostics,
        },
        next_pseudo,
        stage_pseudo,
    })
}

/// Balancing weights, optional arm splines, contribution table and
/// surrogate rule search on the stage-1 complete-case sample.
pub fn fit_single_stage(cohort: &CohortDataset, flavor: Flavor, config: &DtrConfig) -> Result<FittedRegime> {
    if cohort.stages() != 1 {
        return Err(RegimeError::Config(format!(
            "single-stage fit needs a one-stage cohort, got {} stages",
            cohort.stages()
        )));
    }
    let mut cfg = config.clone();
    cfg.flavor = flavor;
    fit_multistage_inner(cohort, &cfg)
}

/// Backward induction over stages `T, ..., 1`.
pub fn fit_multistage(cohort: &CohortDataset, config: &DtrConfig) -> Result<FittedRegime> {
    if cohort.stages() < 2 {
        return Err(RegimeError::Config("multi-stage fit needs at least two stages".into()));
    }
    fit_multistage_inner(cohort, config)
}

fn fit_multistage_inner(cohort: &CohortDataset, config: &DtrConfig) -> Result<FittedRegime> {
    let t_max = cohort.stages();
    let mut warnings = Vec::new();
    let mut fits = Vec::with_capacity(t_max);
    let mut later: Option<BTreeMap<usize, f64>> = None;
    let mut first_stage_pseudo = Vec::new();
    for stage in (1..=t_max).rev() {
        let out = fit_stage(cohort, stage, config, later.as_ref(), stage > 1, &mut warnings)?;
        if stage == 1 && t_max > 1 {
            first_stage_pseudo = out.stage_pseudo;
        }
        later = Some(out.next_pseudo);
        fits.push(out.fit);
    }
    fits.reverse();
    Ok(FittedRegime {
        stages: fits,
        pseudo_outcomes: first_stage_pseudo,
        warnings,
    })
}
