//! Seeded generators for the three simulation scenarios and oracle
//! evaluation of fitted regimes against full counterfactual truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data_model::{Arm, CohortDataset, Combiner, StageRecord, Trajectory};
use crate::error::{RegimeError, Result};
use crate::missingness::MissingnessRows;
use nalgebra::DMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioId {
    #[serde(rename = "SIM1")]
    Sim1,
    #[serde(rename = "SIM2")]
    Sim2,
    #[serde(rename = "SIM3")]
    Sim3,
}

impl ScenarioId {
    pub fn stages(self) -> usize {
        match self {
            ScenarioId::Sim1 => 1,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioId::Sim1 => "SIM1",
            ScenarioId::Sim2 => "SIM2",
            ScenarioId::Sim3 => "SIM3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SIM1" => Ok(ScenarioId::Sim1),
            "SIM2" => Ok(ScenarioId::Sim2),
            "SIM3" => Ok(ScenarioId::Sim3),
            other => Err(RegimeError::Config(format!("unknown scenario '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: ScenarioId,
    pub n: usize,
    pub seed: u64,
    pub alpha_ax: Option<f64>,
    /// Standard deviation of the outcome noise (1 in every scenario; 0 gives
    /// the noiseless variant).
    pub noise_sd: f64,
}

impl ScenarioSpec {
    pub fn new(scenario: ScenarioId, n: usize, seed: u64) -> Self {
        ScenarioSpec {
            scenario,
            n,
            seed,
            alpha_ax: None,
            noise_sd: 1.0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha_ax = Some(alpha);
        self
    }

    pub fn noiseless(mut self) -> Self {
        self.noise_sd = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(RegimeError::Config("scenario sample size must be at least 10".into()));
        }
        if self.scenario == ScenarioId::Sim3 && self.alpha_ax.is_none() {
            return Err(RegimeError::Config("SIM3 requires alpha_ax".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(RegimeError::Config("noise_sd must be nonnegative".into()));
        }
        Ok(())
    }

    fn alpha(&self) -> f64 {
        match self.scenario {
            ScenarioId::Sim3 => self.alpha_ax.unwrap_or(0.0),
            _ => 0.0,
        }
    }
}

/// Every latent quantity of one simulated patient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientDraw {
    pub x11: f64,
    pub x12: f64,
    pub x21: f64,
    pub x22: f64,
    pub r1: bool,
    pub r2: bool,
    pub a1: Arm,
    pub a2: Arm,
    pub eps1: f64,
    pub eps2: f64,
    pub y1: f64,
    pub y2: f64,
    /// `P(R_2 = 1 | ...)` under the generating mechanism (two-stage scenarios).
    pub pi2: f64,
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn stage1_outcome(s: ScenarioId, x11: f64, x12: f64, a1: Arm, eps: f64) -> f64 {
    let shift = if s == ScenarioId::Sim1 { 1.0 } else { 1.5 };
    -2.0 + 2.0 * a1.sign() * (shift - x12) + 2.0 * x11 * x11 + x12 + eps
}

fn stage2_outcome(x12: f64, x21: f64, x22: f64, a1: Arm, a2: Arm, eps: f64) -> f64 {
    -3.0 + a2.sign() * (1.0 - a1.sign() + x22) + 2.0 * x12 - 2.0 * x21 * x21 + eps
}

fn draw_patient(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> PatientDraw {
    let s = spec.scenario;
    let unif02 = Uniform::new(0.0, 2.0).expect("valid range");
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = if s == ScenarioId::Sim1 {
        0.0
    } else {
        rng.sample(StandardNormal)
    };
    let x11 = z1;
    let x21 = 0.5 * z1 + 0.75f64.sqrt() * z2;
    let x12 = rng.sample(unif02);
    let r1 = rng.random::<f64>() < 1.0 / (1.0 + (x12 - 3.0f64).exp());
    let p_a1 = expit(-1.0 + 2.0 * x11 * x11 - x12 * x12 - if r1 { 1.0 } else { 0.0 });
    let a1 = if rng.random::<f64>() < p_a1 {
        Arm::Plus
    } else {
        Arm::Minus
    };
    let eps1 = spec.noise_sd * rng.sample::<f64, _>(StandardNormal);
    let y1 = stage1_outcome(s, x11, x12, a1, eps1);
    if s == ScenarioId::Sim1 {
        return PatientDraw {
            x11,
            x12,
            x21: 0.0,
            x22: 0.0,
            r1,
            r2: true,
            a1,
            a2: Arm::Plus,
            eps1,
            eps2: 0.0,
            y1,
            y2: 0.0,
            pi2: 1.0,
        };
    }
    let x22 = rng.sample(unif02);
    let lp = -1.0 + a1.sign() - y1 + 2.0 * x21 * x21 - x22 + spec.alpha() * a1.sign() * x11;
    let pi2 = 1.0 / (1.0 + lp.exp());
    let r2 = rng.random::<f64>() < pi2;
    let p_a2 = expit(2.0 - x21 * x21 + x22 - if r2 { 1.0 } else { 0.0 });
    let a2 = if rng.random::<f64>() < p_a2 {
        Arm::Plus
    } else {
        Arm::Minus
    };
    let eps2 = spec.noise_sd * rng.sample::<f64, _>(StandardNormal);
    let y2 = stage2_outcome(x12, x21, x22, a1, a2, eps2);
    PatientDraw {
        x11,
        x12,
        x21,
        x22,
        r1,
        r2,
        a1,
        a2,
        eps1,
        eps2,
        y1,
        y2,
        pi2,
    }
}

/// Generated cohort plus the hidden truth needed for oracle evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulatedData {
    pub spec: ScenarioSpec,
    pub cohort: CohortDataset,
    pub draws: Vec<PatientDraw>,
}

pub fn generate_scenario(spec: &ScenarioSpec) -> Result<SimulatedData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draws: Vec<PatientDraw> = (0..spec.n).map(|_| draw_patient(spec, &mut rng)).collect();
    let cohort = build_cohort(spec.scenario, &draws, false)?;
    Ok(SimulatedData {
        spec: spec.clone(),
        cohort,
        draws,
    })
}

fn build_cohort(s: ScenarioId, draws: &[PatientDraw], reveal: bool) -> Result<CohortDataset> {
    let trajectories = draws
        .iter()
        .enumerate()
        .map(|(id, d)| {
            let mut stages = vec![StageRecord {
                covariates: vec![Some(d.x11), (reveal || d.r1).then_some(d.x12)],
                treatment: d.a1,
                outcome: d.y1,
            }];
            if s != ScenarioId::Sim1 {
                stages.push(StageRecord {
                    covariates: vec![Some(d.x21), (reveal || d.r2).then_some(d.x22)],
                    treatment: d.a2,
                    outcome: d.y2,
                });
            }
            Trajectory { id, stages }
        })
        .collect();
    CohortDataset::new(trajectories, vec![2; s.stages()], Combiner::Sum)
}

impl SimulatedData {
    /// Same patients with every covariate observed.
    pub fn revealed(&self) -> Result<CohortDataset> {
        build_cohort(self.spec.scenario, &self.draws, true)
    }

    /// Stage-1 pseudo-outcome implied by the mechanism, per patient.
    pub fn true_pseudo_outcomes(&self) -> Vec<f64> {
        self.draws.iter().map(true_pseudo_outcome).collect()
    }

    /// Generating probability that the stage-1 pseudo-outcome is observed,
    /// for patients in the stage-1 complete-case sample (by id).
    pub fn true_pseudo_response(&self) -> Vec<(usize, f64)> {
        self.draws
            .iter()
            .enumerate()
            .filter(|(_, d)| d.r1)
            .map(|(i, d)| (i, d.pi2))
            .collect()
    }

    /// Mean squared error of estimated stage-1 pseudo-outcomes `(id, value)`.
    pub fn pseudo_mse(&self, estimates: &[(usize, f64)]) -> Option<f64> {
        if self.spec.scenario == ScenarioId::Sim1 || estimates.is_empty() {
            return None;
        }
        let total: f64 = estimates
            .iter()
            .map(|&(id, v)| (v - true_pseudo_outcome(&self.draws[id])).powi(2))
            .sum();
        Some(total / estimates.len() as f64)
    }
}

/// `-2 - A1 + X22 + 2 X12 - 2 X21² + Y1`.
pub fn true_pseudo_outcome(d: &PatientDraw) -> f64 {
    -2.0 - d.a1.sign() + d.x22 + 2.0 * d.x12 - 2.0 * d.x21 * d.x21 + d.y1
}

/// Optimal action given the raw stage history (`X1_1, X1_2` at stage 1).
pub fn true_optimal_action(scenario: ScenarioId, stage: usize, h: &[f64]) -> Arm {
    match (scenario, stage) {
        (_, 1) => Arm::from_score(1.0 - h[1]),
        _ => Arm::Plus,
    }
}

/// Anything that maps a raw stage history to an action.
pub trait Policy {
    fn decide(&self, stage: usize, history: &[f64]) -> Arm;
}

impl<F: Fn(usize, &[f64]) -> Arm> Policy for F {
    fn decide(&self, stage: usize, history: &[f64]) -> Arm {
        self(stage, history)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub value: f64,
    pub opt_pct: f64,
    pub opt_stage: Vec<f64>,
}

/// Mean potential final outcome and agreement with the optimal actions over
/// the given patients, following the policy's own treatment path.
pub fn evaluate_on_draws(scenario: ScenarioId, draws: &[PatientDraw], policy: &dyn Policy) -> Evaluation {
    let stages = scenario.stages();
    let mut value = 0.0;
    let mut all_ok = 0usize;
    let mut stage_ok = vec![0usize; stages];
    for d in draws {
        let h1 = [d.x11, d.x12];
        let a1 = policy.decide(1, &h1);
        let y1 = stage1_outcome(scenario, d.x11, d.x12, a1, d.eps1);
        let mut ok = a1 == true_optimal_action(scenario, 1, &h1);
        stage_ok[0] += ok as usize;
        let mut total = y1;
        if stages == 2 {
            let h2 = [d.x11, d.x12, a1.sign(), y1, d.x21, d.x22];
            let a2 = policy.decide(2, &h2);
            total += stage2_outcome(d.x12, d.x21, d.x22, a1, a2, d.eps2);
            let ok2 = a2 == true_optimal_action(scenario, 2, &h2);
            stage_ok[1] += ok2 as usize;
            ok &= ok2;
        }
        value += total;
        all_ok += ok as usize;
    }
    let n = draws.len() as f64;
    Evaluation {
        value: value / n,
        opt_pct: all_ok as f64 / n,
        opt_stage: stage_ok.iter().map(|&c| c as f64 / n).collect(),
    }
}

/// Evaluation on a fresh cohort of `eval_n` patients drawn with `seed`.
pub fn evaluate_regime(
    scenario: ScenarioId,
    alpha_ax: Option<f64>,
    policy: &dyn Policy,
    eval_n: usize,
    seed: u64,
) -> Result<Evaluation> {
    let mut spec = ScenarioSpec::new(scenario, eval_n, seed);
    spec.alpha_ax = alpha_ax.or((scenario == ScenarioId::Sim3).then_some(0.0));
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<PatientDraw> = (0..eval_n).map(|_| draw_patient(&spec, &mut rng)).collect();
    Ok(evaluate_on_draws(scenario, &draws, policy))
}

/// `u ~ U(0,1)`, `z ~ N(0,1)`, `y = 1 + u + z + e/2` with the outcome
/// missing with odds `exp(-3 + u + γ y)`.
pub fn generate_missingness_synthetic(n: usize, gamma: f64, seed: u64) -> MissingnessRows {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    for _ in 0..n {
        let ui: f64 = rng.random();
        let zi: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        let yi = 1.0 + ui + zi + 0.5 * e;
        let p_obs = 1.0 / (1.0 + (-3.0 + ui + gamma * yi).exp());
        let ri = rng.random::<f64>() < p_obs;
        u.push(ui);
        z.push(zi);
        y.push(ri.then_some(yi));
        r.push(ri);
    }
    MissingnessRows {
        u: DMatrix::from_column_slice(n, 1, &u),
        z: DMatrix::from_column_slice(n, 1, &z),
        y,
        r,
    }
}
