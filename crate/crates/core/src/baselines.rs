//! Comparator estimators: parametric (optionally missingness-weighted)
//! Q-learning and an inverse-propensity outcome-weighted rule.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_model::{build_stage_sample, Arm, CohortDataset, StageSample};
use crate::dtr::{estimate_propensities, DtrConfig, FittedRegime, StageDiagnostics, StageFit};
use crate::error::{RegimeError, Result};
use crate::qreg::Penalty;
use crate::rule_search::{fit_rule, DecisionRule};
use crate::simgen::ScenarioId;
use crate::value::{build_omega, Flavor, OmegaTable};

pub const PROPENSITY_CLIP: (f64, f64) = (0.01, 0.99);

/// A product of history columns raised to powers; the empty product is the
/// intercept.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub factors: Vec<(String, u32)>,
}

impl Term {
    pub fn intercept() -> Self {
        Term { factors: Vec::new() }
    }

    pub fn column(name: &str) -> Self {
        Term {
            factors: vec![(name.to_string(), 1)],
        }
    }

    fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text == "1" {
            return Ok(Term::intercept());
        }
        let mut factors = Vec::new();
        for f in text.split('*') {
            let f = f.trim();
            let (name, power) = match f.split_once('^') {
                Some((n, p)) => (
                    n.trim(),
                    p.trim()
                        .parse::<u32>()
                        .map_err(|_| RegimeError::Config(format!("bad exponent in term '{text}'")))?,
                ),
                None => (f, 1),
            };
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(RegimeError::Config(format!("bad factor '{f}' in term '{text}'")));
            }
            factors.push((name.to_string(), power));
        }
        Ok(Term { factors })
    }

    /// The single column of a linear term, `None` for the intercept.
    fn linear_column(&self) -> Option<Option<&str>> {
        match self.factors.as_slice() {
            [] => Some(None),
            [(name, 1)] => Some(Some(name.as_str())),
            _ => None,
        }
    }
}

/// Parses `"1 + X1_1^2 + X1_2*A1"`.
pub fn parse_terms(text: &str) -> Result<Vec<Term>> {
    let terms: Vec<Term> = text.split('+').map(Term::parse).collect::<Result<_>>()?;
    if terms.is_empty() {
        return Err(RegimeError::Config("empty formula".into()));
    }
    Ok(terms)
}

/// `Q(h, a) = main(h)'β + a · blip(h)'ψ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QFormula {
    pub main: Vec<Term>,
    pub blip: Vec<Term>,
}

impl QFormula {
    pub fn parse(main: &str, blip: &str) -> Result<Self> {
        Ok(QFormula {
            main: parse_terms(main)?,
            blip: parse_terms(blip)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelSpec {
    Correct,
    Incorrect,
}

/// Per-stage formulas used in the simulation studies.
pub fn builtin_formulas(scenario: ScenarioId, spec: ModelSpec) -> Vec<QFormula> {
    let f = |m: &str, b: &str| QFormula::parse(m, b).expect("built-in formula parses");
    let stage1 = match spec {
        ModelSpec::Correct => f("1 + X1_1^2 + X1_2", "1 + X1_2"),
        ModelSpec::Incorrect => f("1 + X1_1", "1 + X1_2"),
    };
    match scenario {
        ScenarioId::Sim1 => vec![stage1],
        ScenarioId::Sim2 | ScenarioId::Sim3 => {
            let stage2 = match spec {
                ModelSpec::Correct => f("1 + Y1 + X1_2 + X2_1^2", "1 + A1 + X2_2"),
                ModelSpec::Incorrect => f("1 + X2_1", "1 + A1 + X2_2"),
            };
            vec![stage1, stage2]
        }
    }
}

fn term_values(sample: &StageSample, term: &Term) -> Result<Vec<f64>> {
    let mut v = vec![1.0; sample.len()];
    for (name, power) in &term.factors {
        let j = sample.column_index(name)?;
        for (i, x) in v.iter_mut().enumerate() {
            *x *= sample.histories[(i, j)].powi(*power as i32);
        }
    }
    Ok(v)
}

fn term_block(sample: &StageSample, terms: &[Term]) -> Result<DMatrix<f64>> {
    let cols: Vec<Vec<f64>> = terms.iter().map(|t| term_values(sample, t)).collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(sample.len(), terms.len(), |i, j| cols[j][i]))
}

#[derive(Clone, Debug)]
pub struct LeastSquares {
    pub coef: Vec<f64>,
    pub rank_deficient: bool,
}

/// Weighted least squares; the minimum-norm solution when the weighted
/// design is rank deficient.
pub fn weighted_least_squares(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<LeastSquares> {
    let (n, p) = x.shape();
    if y.len() != n || w.len() != n {
        return Err(RegimeError::Data(
            "least-squares inputs have inconsistent lengths".into(),
        ));
    }
    let sw: Vec<f64> = w.iter().map(|v| v.max(0.0).sqrt()).collect();
    let xw = DMatrix::from_fn(n, p, |i, j| sw[i] * x[(i, j)]);
    let yw = DVector::from_fn(n, |i, _| sw[i] * y[i]);
    let svd = xw.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-10 * (n.max(p) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let coef = svd
        .solve(&yw, eps)
        .map_err(|e| RegimeError::Numeric(format!("least-squares solve failed: {e}")))?;
    Ok(LeastSquares {
        coef: coef.iter().copied().collect(),
        rank_deficient: rank < p,
    })
}

fn blip_rule(sample: &StageSample, blip: &[Term], psi: &[f64]) -> Result<DecisionRule> {
    let mut intercept = 0.0;
    let mut features = Vec::new();
    let mut names = Vec::new();
    let mut coef = Vec::new();
    for (t, &c) in blip.iter().zip(psi) {
        match t.linear_column() {
            Some(None) => intercept += c,
            Some(Some(name)) => {
                features.push(sample.column_index(name)?);
                names.push(name.to_string());
                coef.push(c);
            }
            None => {
                return Err(RegimeError::Config(
                    "treatment-interaction terms must be the intercept or single columns".into(),
                ))
            }
        }
    }
    Ok(DecisionRule::linear(features, names, intercept, coef))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissingWeighting {
    None,
    /// Inverse estimated pseudo-outcome response propensity.
    Ee,
}

/// Backward-induction Q-learning with linear working models. `config`
/// supplies the missingness model settings used when `weighting` is `Ee`.
pub fn fit_parametric_q_learning(
    cohort: &CohortDataset,
    formulas: &[QFormula],
    weighting: MissingWeighting,
    config: &DtrConfig,
) -> Result<FittedRegime> {
    let t_max = cohort.stages();
    if formulas.len() != t_max {
        return Err(RegimeError::Config(format!(
            "need one formula per stage ({t_max}), got {}",
            formulas.len()
        )));
    }
    let mut cfg = config.clone();
    cfg.weight_missing = weighting == MissingWeighting::Ee;
    let mut warnings = Vec::new();
    let mut fits = Vec::with_capacity(t_max);
    let mut later: Option<BTreeMap<usize, f64>> = None;
    let mut first_stage_pseudo = Vec::new();
    for stage in (1..=t_max).rev() {
        let raw = build_stage_sample(cohort, stage)?;
        if raw.is_empty() {
            return Err(RegimeError::Data(format!(
                "stage {stage} complete-case sample is empty"
            )));
        }
        let pseudo: Vec<Option<f64>> = match &later {
            None => raw.pseudo_outcomes.clone(),
            Some(map) => raw.ids.iter().map(|id| map.get(id).copied()).collect(),
        };
        let raw = raw.with_pseudo_outcomes(pseudo.clone())?;
        let est = estimate_propensities(&raw, &pseudo, &cfg, &mut warnings)?;
        let weights: Vec<f64> = est.propensity.iter().map(|p| p.map_or(0.0, |v| 1.0 / v)).collect();

        let f = &formulas[stage - 1];
        let main = term_block(&raw, &f.main)?;
        let blip = term_block(&raw, &f.blip)?;
        let (n, pm, pb) = (raw.len(), f.main.len(), f.blip.len());
        let signs: Vec<f64> = raw.treatments.iter().map(|a| a.sign()).collect();
        let design = DMatrix::from_fn(n, pm + pb, |i, j| {
            if j < pm {
                main[(i, j)]
            } else {
                signs[i] * blip[(i, j - pm)]
            }
        });
        let y: Vec<f64> = pseudo.iter().map(|p| p.unwrap_or(0.0)).collect();
        let ls = weighted_least_squares(&design, &y, &weights)?;
        if ls.rank_deficient {
            warnings.push(format!(
                "stage {stage}: rank-deficient Q-model design, minimum-norm solution used"
            ));
        }
        let (beta, psi) = ls.coef.split_at(pm);
        let rule = blip_rule(&raw, &f.blip, psi)?;

        let mut next = BTreeMap::new();
        for i in 0..n {
            let m: f64 = (0..pm).map(|j| main[(i, j)] * beta[j]).sum();
            let b: f64 = (0..pb).map(|j| blip[(i, j)] * psi[j]).sum();
            next.insert(raw.ids[i], m + b.abs());
        }
        if stage == 1 && t_max > 1 {
            first_stage_pseudo = raw
                .ids
                .iter()
                .zip(&pseudo)
                .filter_map(|(id, p)| p.map(|v| (*id, v)))
                .collect();
        }
        later = Some(next);
        fits.push(StageFit {
            stage,
            rule,
            diagnostics: StageDiagnostics {
                sample_size: n,
                coefficients: Some(ls.coef.clone()),
                rank_deficient: ls.rank_deficient,
                gmm: est.gmm,
                gamma: est.gamma,
                propensity_floor_count: est.floor_count,
                pseudo_coverage: pseudo.iter().filter(|p| p.is_some()).count() as f64 / n as f64,
                ..Default::default()
            },
        });
    }
    fits.reverse();
    Ok(FittedRegime {
        stages: fits,
        pseudo_outcomes: first_stage_pseudo,
        warnings,
    })
}

#[derive(Clone, Debug)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Logistic regression of `1{A = +1}` on `(1, x)` by iteratively
/// reweighted least squares.
pub fn fit_logistic(x: &DMatrix<f64>, plus: &[bool]) -> Result<LogisticFit> {
    let (n, p) = x.shape();
    let design = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let target: Vec<f64> = plus.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut beta = DVector::<f64>::zeros(p + 1);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..100 {
        iterations = it + 1;
        let eta = &design * &beta;
        let mu: Vec<f64> = eta.iter().map(|e| 1.0 / (1.0 + (-e).exp())).collect();
        let w: Vec<f64> = mu.iter().map(|m| (m * (1.0 - m)).max(1e-10)).collect();
        let z: Vec<f64> = (0..n).map(|i| eta[i] + (target[i] - mu[i]) / w[i]).collect();
        let ls = weighted_least_squares(&design, &z, &w)?;
        let new = DVector::from_vec(ls.coef);
        let change = (&new - &beta).amax();
        beta = new;
        if change < 1e-10 || beta.amax() > 50.0 {
            converged = change < 1e-10;
            break;
        }
    }
    Ok(LogisticFit {
        coef: beta.iter().copied().collect(),
        iterations,
        converged,
    })
}

/// Single-stage outcome-weighted rule with `Ω(a) = I(A = a) y / P̂(A = a | h)`
/// and a logistic propensity whose linear predictor is an intercept plus
/// `propensity_terms` (e.g. `"X1_1^2 + X1_2"`).
pub fn fit_owl_ipw(
    cohort: &CohortDataset,
    propensity_terms: &str,
    rule_features: &[String],
    rule_penalty: Penalty,
) -> Result<FittedRegime> {
    if cohort.stages() != 1 {
        return Err(RegimeError::Config("the IPW rule is single-stage only".into()));
    }
    let raw = build_stage_sample(cohort, 1)?;
    if raw.is_empty() {
        return Err(RegimeError::Data("stage 1 complete-case sample is empty".into()));
    }
    let terms: Vec<Term> = parse_terms(propensity_terms)?
        .into_iter()
        .filter(|t| !t.factors.is_empty())
        .collect();
    let x = term_block(&raw, &terms)?;
    let p_terms = terms.len();
    let plus = raw.arm_indicator(Arm::Plus);
    let logit = fit_logistic(&x, &plus)?;
    let mut clipped = 0;
    let weights: Vec<f64> = (0..raw.len())
        .map(|i| {
            let eta = logit.coef[0] + (0..p_terms).map(|j| logit.coef[j + 1] * x[(i, j)]).sum::<f64>();
            let p = 1.0 / (1.0 + (-eta).exp());
            let pc = p.clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1);
            clipped += (pc != p) as usize;
            let pa = if plus[i] { pc } else { 1.0 - pc };
            1.0 / pa
        })
        .collect();
    let omega: OmegaTable = build_omega(&raw.treatments, &weights, &raw.pseudo_outcomes, None, None)?;
    let features: Vec<usize> = rule_features
        .iter()
        .map(|c| raw.column_index(c))
        .collect::<Result<_>>()?;
    let fit = fit_rule(&omega, &raw.histories, &features, rule_features, rule_penalty)?;
    let mut warnings = Vec::new();
    if clipped > 0 {
        warnings.push(format!("{clipped} treatment propensities clipped"));
    }
    if !logit.converged {
        warnings.push("logistic propensity fit did not converge".into());
    }
    Ok(FittedRegime {
        stages: vec![StageFit {
            stage: 1,
            rule: fit.rule.clone(),
            diagnostics: StageDiagnostics {
                sample_size: raw.len(),
                coefficients: Some(logit.coef),
                clipped_propensities: clipped,
                pseudo_coverage: 1.0,
                rule_lambda: fit.rule.lambda,
                rule_note: fit.diagnostic,
                ..Default::default()
            },
        }],
        pseudo_outcomes: Vec::new(),
        warnings,
    })
}

/// IPW contribution table given known treatment propensities `P(A = +1 | h)`.
pub fn ipw_omega(treatments: &[Arm], outcomes: &[Option<f64>], p_plus: &[f64]) -> Result<OmegaTable> {
    let weights: Vec<f64> = treatments
        .iter()
        .zip(p_plus)
        .map(|(a, &p)| {
            let pc = p.clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1);
            if *a == Arm::Plus {
                1.0 / pc
            } else {
                1.0 / (1.0 - pc)
            }
        })
        .collect();
    let mut om = build_omega(treatments, &weights, outcomes, None, None)?;
    om.flavor = Flavor::Bw;
    Ok(om)
}
