//! Per-row contribution pairs `Ω(+1), Ω(-1)` and the weighted value estimators.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data_model::Arm;
use crate::error::{RegimeError, Result};
use crate::qreg::ArmModels;
use crate::rule_search::DecisionRule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flavor {
    /// Balancing weights only.
    Bw,
    /// Balancing weights augmented with Q-function predictions.
    Abw,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OmegaTable {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
    /// `r / π̂`: 0 for non-responders, `>= 1` otherwise.
    pub miss_weight: Vec<f64>,
    pub flavor: Flavor,
}

impl OmegaTable {
    pub fn len(&self) -> usize {
        self.plus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plus.is_empty()
    }

    pub fn get(&self, i: usize, arm: Arm) -> f64 {
        match arm {
            Arm::Plus => self.plus[i],
            Arm::Minus => self.minus[i],
        }
    }

    pub fn subset(&self, rows: &[usize]) -> OmegaTable {
        OmegaTable {
            plus: rows.iter().map(|&i| self.plus[i]).collect(),
            minus: rows.iter().map(|&i| self.minus[i]).collect(),
            miss_weight: rows.iter().map(|&i| self.miss_weight[i]).collect(),
            flavor: self.flavor,
        }
    }
}

/// Q-function predictions for both arms at every sample row.
#[derive(Clone, Debug)]
pub struct ArmPredictions {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

impl ArmPredictions {
    pub fn from_models(models: &ArmModels, scaled_histories: &DMatrix<f64>) -> Self {
        ArmPredictions {
            plus: models.plus.predict_rows(scaled_histories),
            minus: models.minus.predict_rows(scaled_histories),
        }
    }

    fn get(&self, i: usize, arm: Arm) -> f64 {
        match arm {
            Arm::Plus => self.plus[i],
            Arm::Minus => self.minus[i],
        }
    }
}

/// `Ω^BW(a) = w I(A=a) y` and `Ω^ABW(a) = w I(A=a) y - (w I(A=a) - 1) Q̂(h, a)`.
///
/// `weights` are the merged balancing weights; `miss_weight` is `r / π̂`
/// (pass `None` for all ones). Rows without an outcome must carry a zero
/// missingness weight and get `Ω = 0`.
pub fn build_omega(
    treatments: &[Arm],
    weights: &[f64],
    outcomes: &[Option<f64>],
    predictions: Option<&ArmPredictions>,
    miss_weight: Option<&[f64]>,
) -> Result<OmegaTable> {
    let n = treatments.len();
    if weights.len() != n || outcomes.len() != n {
        return Err(RegimeError::Data("omega inputs have inconsistent lengths".into()));
    }
    let mw: Vec<f64> = match miss_weight {
        Some(m) if m.len() == n => m.to_vec(),
        Some(_) => return Err(RegimeError::Data("missingness weight length mismatch".into())),
        None => vec![1.0; n],
    };
    let mut plus = vec![0.0; n];
    let mut minus = vec![0.0; n];
    for i in 0..n {
        let Some(y) = outcomes[i] else {
            if mw[i] != 0.0 {
                return Err(RegimeError::Data(format!(
                    "row {i} has no outcome but a nonzero missingness weight"
                )));
            }
            continue;
        };
        for arm in Arm::BOTH {
            let wi = if treatments[i] == arm { weights[i] } else { 0.0 };
            let v = match predictions {
                None => wi * y,
                Some(p) => wi * y - (wi - 1.0) * p.get(i, arm),
            };
            match arm {
                Arm::Plus => plus[i] = v,
                Arm::Minus => minus[i] = v,
            }
        }
    }
    if plus.iter().chain(&minus).any(|v| !v.is_finite()) {
        return Err(RegimeError::Numeric("non-finite omega entry".into()));
    }
    Ok(OmegaTable {
        plus,
        minus,
        miss_weight: mw,
        flavor: if predictions.is_some() { Flavor::Abw } else { Flavor::Bw },
    })
}

/// `mean_i (r_i/π̂_i) Ω_i(d(h_i))` over raw histories.
pub fn estimate_value(omega: &OmegaTable, rule: &DecisionRule, histories: &DMatrix<f64>) -> f64 {
    let n = omega.len();
    (0..n)
        .map(|i| {
            let h: Vec<f64> = histories.row(i).iter().copied().collect();
            omega.miss_weight[i] * omega.get(i, rule.decide(&h))
        })
        .sum::<f64>()
        / n as f64
}

/// Same estimator with decisions supplied directly.
pub fn value_of_decisions(omega: &OmegaTable, decisions: &[Arm]) -> f64 {
    decisions
        .iter()
        .enumerate()
        .map(|(i, &d)| omega.miss_weight[i] * omega.get(i, d))
        .sum::<f64>()
        / omega.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule_follow_first_column() -> DecisionRule {
        DecisionRule::linear(vec![0], vec!["X1_1".into()], 0.0, vec![1.0])
    }

    #[test]
    fn abw_special_cases() {
        let preds = ArmPredictions {
            plus: vec![10.0, 20.0],
            minus: vec![-10.0, -20.0],
        };
        let om = build_omega(
            &[Arm::Plus, Arm::Minus],
            &[1.0, 3.0],
            &[Some(4.0), Some(5.0)],
            Some(&preds),
            None,
        )
        .unwrap();
        // A = a with w = 1: augmentation vanishes.
        assert_eq!(om.plus[0], 4.0);
        // A != a: Ω(a) = Q̂(h, a).
        assert_eq!(om.minus[0], -10.0);
        assert_eq!(om.plus[1], 20.0);
        assert_eq!(om.minus[1], 3.0 * 5.0 - 2.0 * -20.0);
        assert_eq!(om.flavor, Flavor::Abw);
    }

    #[test]
    fn bw_direct_formula() {
        let om = build_omega(&[Arm::Plus], &[2.0], &[Some(3.0)], None, None).unwrap();
        assert_eq!(om.plus[0], 6.0);
        assert_eq!(om.minus[0], 0.0);
    }

    #[test]
    fn observed_rule_unit_weights_gives_mean_outcome() {
        let treat = [Arm::Plus, Arm::Minus, Arm::Plus, Arm::Minus];
        let y = [1.0, 2.0, 3.0, 6.0];
        let h = DMatrix::from_column_slice(4, 1, &treat.map(|a| a.sign()));
        let om = build_omega(&treat, &[1.0; 4], &y.map(Some), None, None).unwrap();
        let v = estimate_value(&om, &rule_follow_first_column(), &h);
        assert!((v - 3.0).abs() < 1e-15);
    }

    #[test]
    fn abw_with_zero_q_equals_bw() {
        let treat = [Arm::Plus, Arm::Minus, Arm::Minus];
        let w = [1.4, 2.0, 1.1];
        let y = [Some(0.3), Some(-1.0), Some(2.0)];
        let zero = ArmPredictions {
            plus: vec![0.0; 3],
            minus: vec![0.0; 3],
        };
        let a = build_omega(&treat, &w, &y, Some(&zero), None).unwrap();
        let b = build_omega(&treat, &w, &y, None, None).unwrap();
        assert_eq!(a.plus, b.plus);
        assert_eq!(a.minus, b.minus);
    }

    #[test]
    fn missing_outcome_requires_zero_weight() {
        let r = build_omega(&[Arm::Plus], &[1.0], &[None], None, Some(&[1.0]));
        assert!(r.is_err());
        let om = build_omega(&[Arm::Plus], &[1.0], &[None], None, Some(&[0.0])).unwrap();
        assert_eq!((om.plus[0], om.minus[0]), (0.0, 0.0));
    }
}
