//! Linear decision scores fitted by minimising the weighted logistic
//! surrogate of the value-classification loss.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_model::Arm;
use crate::error::{RegimeError, Result};
use crate::qreg::Penalty;
use crate::value::{value_of_decisions, OmegaTable};

const GRAD_TOL: f64 = 1e-8;
const MAX_ITER: usize = 500;
const CV_FOLDS: usize = 5;

/// `d(h) = sgn(β0 + β'z(h))` where `z` standardizes the selected history
/// columns; `sgn(0) = +1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRule {
    pub features: Vec<usize>,
    pub feature_names: Vec<String>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub lambda: f64,
}

impl DecisionRule {
    /// Unstandardized linear score over the given columns.
    pub fn linear(features: Vec<usize>, feature_names: Vec<String>, intercept: f64, coef: Vec<f64>) -> Self {
        let p = features.len();
        DecisionRule {
            features,
            feature_names,
            center: vec![0.0; p],
            scale: vec![1.0; p],
            intercept,
            coef,
            lambda: 0.0,
        }
    }

    pub fn constant(arm: Arm) -> Self {
        DecisionRule::linear(vec![], vec![], arm.sign(), vec![])
    }

    pub fn score(&self, h: &[f64]) -> f64 {
        self.intercept
            + self
                .features
                .iter()
                .enumerate()
                .map(|(k, &j)| self.coef[k] * (h[j] - self.center[k]) / self.scale[k])
                .sum::<f64>()
    }

    pub fn decide(&self, h: &[f64]) -> Arm {
        Arm::from_score(self.score(h))
    }

    /// Intercept and slopes on the raw feature scale.
    pub fn raw_coefficients(&self) -> (f64, Vec<f64>) {
        let slopes: Vec<f64> = self.coef.iter().zip(&self.scale).map(|(b, s)| b / s).collect();
        let b0 = self.intercept - slopes.iter().zip(&self.center).map(|(b, c)| b * c).sum::<f64>();
        (b0, slopes)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `φ(x) = log(1 + e^{-x})`.
pub fn logistic_loss(x: f64) -> f64 {
    softplus(-x)
}

fn logistic_loss_deriv(x: f64) -> f64 {
    // -1 / (1 + e^x)
    if x > 0.0 {
        let e = (-x).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + x.exp())
    }
}

fn sgn(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Surrogate objective over `θ = (β0, β)` with a design of standardized
/// features (no intercept column).
pub struct SurrogateObjective<'a> {
    pub design: &'a DMatrix<f64>,
    pub omega: &'a OmegaTable,
    pub lambda: f64,
}

impl SurrogateObjective<'_> {
    pub fn dim(&self) -> usize {
        self.design.ncols() + 1
    }

    pub fn value_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let n = self.design.nrows();
        let p = self.design.ncols();
        let nf = n as f64;
        let mut f = 0.0;
        let mut g = vec![0.0; p + 1];
        for i in 0..n {
            let mw = self.omega.miss_weight[i];
            if mw == 0.0 {
                continue;
            }
            let (op, om) = (self.omega.plus[i], self.omega.minus[i]);
            let mut score = theta[0];
            for k in 0..p {
                score += theta[k + 1] * self.design[(i, k)];
            }
            let (sp, sm) = (sgn(op), -sgn(om));
            f += mw * (op.abs() * logistic_loss(sp * score) + om.abs() * logistic_loss(sm * score));
            let c = mw
                * (op.abs() * sp * logistic_loss_deriv(sp * score) + om.abs() * sm * logistic_loss_deriv(sm * score));
            g[0] += c;
            for k in 0..p {
                g[k + 1] += c * self.design[(i, k)];
            }
        }
        f /= nf;
        for v in g.iter_mut() {
            *v /= nf;
        }
        for k in 0..p {
            f += self.lambda * theta[k + 1] * theta[k + 1];
            g[k + 1] += 2.0 * self.lambda * theta[k + 1];
        }
        (f, g)
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        self.value_grad(theta).0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RuleFit {
    pub rule: DecisionRule,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Cross-validated value per candidate penalty (AUTO only).
    pub cv_values: Vec<(f64, f64)>,
    pub diagnostic: Option<String>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// BFGS with Armijo backtracking.
fn minimize(obj: &SurrogateObjective) -> (Vec<f64>, f64, f64, usize) {
    let d = obj.dim();
    let mut x = vec![0.0; d];
    let (mut f, mut g) = obj.value_grad(&x);
    let mut h_inv = DMatrix::<f64>::identity(d, d);
    let mut iter = 0;
    while iter < MAX_ITER && inf_norm(&g) > GRAD_TOL {
        iter += 1;
        let gv = DVector::from_column_slice(&g);
        let mut dir = -(&h_inv * &gv);
        let mut slope = dir.dot(&gv);
        if slope >= 0.0 {
            h_inv = DMatrix::identity(d, d);
            dir = -gv.clone();
            slope = dir.dot(&gv);
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..60 {
            let xt: Vec<f64> = (0..d).map(|k| x[k] + t * dir[k]).collect();
            let (ft, gt) = obj.value_grad(&xt);
            if ft <= f + 1e-4 * t * slope {
                next = Some((xt, ft, gt));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn)) = next else { break };
        let s = DVector::from_fn(d, |k, _| xn[k] - x[k]);
        let y = DVector::from_fn(d, |k, _| gn[k] - g[k]);
        let sy = s.dot(&y);
        if sy > 1e-16 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(d, d);
            let a = &eye - &s * y.transpose() * rho;
            let b = &eye - &y * s.transpose() * rho;
            h_inv = &a * &h_inv * &b + &s * s.transpose() * rho;
        }
        let stalled = (f - fnew).abs() <= 1e-16 * f.abs().max(1.0) && inf_norm(&s.data.as_vec()[..]) < 1e-14;
        x = xn;
        f = fnew;
        g = gn;
        if stalled {
            break;
        }
    }
    let gn = inf_norm(&g);
    (x, f, gn, iter)
}

struct Standardized {
    design: DMatrix<f64>,
    center: Vec<f64>,
    scale: Vec<f64>,
}

fn standardize(histories: &DMatrix<f64>, features: &[usize], active: &[bool]) -> Standardized {
    let n = histories.nrows();
    let rows: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
    let m = rows.len().max(1) as f64;
    let mut center = Vec::with_capacity(features.len());
    let mut scale = Vec::with_capacity(features.len());
    for &j in features {
        let mean = rows.iter().map(|&i| histories[(i, j)]).sum::<f64>() / m;
        let var = rows.iter().map(|&i| (histories[(i, j)] - mean).powi(2)).sum::<f64>() / m;
        center.push(mean);
        scale.push(if var > 1e-24 { var.sqrt() } else { 1.0 });
    }
    let design = DMatrix::from_fn(n, features.len(), |i, k| {
        (histories[(i, features[k])] - center[k]) / scale[k]
    });
    Standardized { design, center, scale }
}

fn fit_fixed(
    omega: &OmegaTable,
    histories: &DMatrix<f64>,
    features: &[usize],
    names: &[String],
    lambda: f64,
) -> RuleFit {
    let active: Vec<bool> = omega.miss_weight.iter().map(|&w| w > 0.0).collect();
    let st = standardize(histories, features, &active);
    let obj = SurrogateObjective {
        design: &st.design,
        omega,
        lambda,
    };
    let (theta, f, gn, iter) = minimize(&obj);
    let diagnostic = (gn > GRAD_TOL).then(|| format!("gradient norm {gn:e} above tolerance"));
    RuleFit {
        rule: DecisionRule {
            features: features.to_vec(),
            feature_names: names.to_vec(),
            center: st.center,
            scale: st.scale,
            intercept: theta[0],
            coef: theta[1..].to_vec(),
            lambda,
        },
        objective: f,
        grad_norm: gn,
        iterations: iter,
        cv_values: Vec::new(),
        diagnostic,
    }
}

pub fn rule_lambda_grid() -> Vec<f64> {
    (-4..=0).map(|k| 10f64.powi(k)).collect()
}

/// Fits the rule over the selected history columns (raw scale).
pub fn fit_rule(
    omega: &OmegaTable,
    histories: &DMatrix<f64>,
    features: &[usize],
    feature_names: &[String],
    penalty: Penalty,
) -> Result<RuleFit> {
    let n = omega.len();
    if histories.nrows() != n {
        return Err(RegimeError::Data("omega table and histories are not aligned".into()));
    }
    if features.iter().any(|&j| j >= histories.ncols()) || features.len() != feature_names.len() {
        return Err(RegimeError::Config("feature selector out of range".into()));
    }
    if !omega.miss_weight.iter().any(|&w| w > 0.0) {
        return Err(RegimeError::Data("no rows with positive missingness weight".into()));
    }
    let degenerate = (0..n).all(|i| omega.miss_weight[i] == 0.0 || (omega.plus[i] == 0.0 && omega.minus[i] == 0.0));
    if degenerate {
        let mut rule = DecisionRule::constant(Arm::Plus);
        rule.features = Vec::new();
        return Ok(RuleFit {
            rule,
            objective: 0.0,
            grad_norm: 0.0,
            iterations: 0,
            cv_values: Vec::new(),
            diagnostic: Some("all contributions are zero; constant +1 rule".into()),
        });
    }
    match penalty {
        Penalty::Fixed(l) if l >= 0.0 => Ok(fit_fixed(omega, histories, features, feature_names, l)),
        Penalty::Fixed(_) => Err(RegimeError::Config("rule penalty must be nonnegative".into())),
        Penalty::Auto => {
            let grid = rule_lambda_grid();
            let mut cv_values = Vec::with_capacity(grid.len());
            for &l in &grid {
                let mut total = 0.0;
                for fold in 0..CV_FOLDS {
                    let train: Vec<usize> = (0..n).filter(|i| i % CV_FOLDS != fold).collect();
                    let test: Vec<usize> = (0..n).filter(|i| i % CV_FOLDS == fold).collect();
                    if test.is_empty() {
                        continue;
                    }
                    let om_train = omega.subset(&train);
                    if !om_train.miss_weight.iter().any(|&w| w > 0.0) {
                        continue;
                    }
                    let fit = fit_fixed(&om_train, &histories.select_rows(&train), features, feature_names, l);
                    let decisions: Vec<Arm> = test
                        .iter()
                        .map(|&i| fit.rule.decide(&histories.row(i).iter().copied().collect::<Vec<_>>()))
                        .collect();
                    total += value_of_decisions(&omega.subset(&test), &decisions) * test.len() as f64;
                }
                cv_values.push((l, total / n as f64));
            }
            // Largest value; ties toward the larger penalty.
            let mut best = cv_values[0];
            for &(l, v) in &cv_values[1..] {
                if v > best.1 || (v == best.1 && l > best.0) {
                    best = (l, v);
                }
            }
            let mut fit = fit_fixed(omega, histories, features, feature_names, best.0);
            fit.cv_values = cv_values;
            Ok(fit)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::Flavor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(plus: Vec<f64>, minus: Vec<f64>) -> OmegaTable {
        let n = plus.len();
        OmegaTable {
            plus,
            minus,
            miss_weight: vec![1.0; n],
            flavor: Flavor::Bw,
        }
    }

    fn random_problem(n: usize, seed: u64) -> (DMatrix<f64>, OmegaTable) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = DMatrix::from_fn(n, 2, |_, _| 2.0 * rng.random::<f64>());
        let mut plus = Vec::new();
        let mut minus = Vec::new();
        for i in 0..n {
            let blip = 1.0 - h[(i, 1)];
            plus.push(blip + rng.random::<f64>() - 0.5);
            minus.push(-blip + rng.random::<f64>() - 0.5);
        }
        let mut om = table(plus, minus);
        om.miss_weight = (0..n)
            .map(|i| if i % 7 == 0 { 0.0 } else { 1.0 + (i % 3) as f64 })
            .collect();
        (h, om)
    }

    #[test]
    fn decide_sign_convention() {
        let r = DecisionRule::linear(vec![0], vec!["x".into()], 0.0, vec![1.0]);
        assert_eq!(r.decide(&[0.0]), Arm::Plus);
        assert_eq!(r.decide(&[-0.3]), Arm::Minus);
        assert_eq!(r.decide(&[1e-15]), Arm::Plus);
    }

    #[test]
    fn dominant_plus_gives_plus_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 60;
        let h = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
        let om = table((0..n).map(|i| 1.0 + h[(i, 0)]).collect(), vec![-0.5; n]);
        let fit = fit_rule(&om, &h, &[0], &["X1_1".into()], Penalty::Fixed(1e-4)).unwrap();
        for i in 0..n {
            assert_eq!(fit.rule.decide(&[h[(i, 0)]]), Arm::Plus);
        }
    }

    #[test]
    fn recovers_threshold_rule() {
        let (h, om) = random_problem(400, 2);
        let fit = fit_rule(&om, &h, &[1], &["X1_2".into()], Penalty::Auto).unwrap();
        let (b0, b) = fit.rule.raw_coefficients();
        let threshold = -b0 / b[0];
        assert!(b[0] < 0.0);
        assert!((threshold - 1.0).abs() < 0.15, "threshold {threshold}");
        assert_eq!(fit.cv_values.len(), 5);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (h, om) = random_problem(80, 3);
        let st = standardize(&h, &[0, 1], &[true; 80]);
        let obj = SurrogateObjective {
            design: &st.design,
            omega: &om,
            lambda: 0.05,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let th: Vec<f64> = (0..3).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
            let (_, g) = obj.value_grad(&th);
            for k in 0..3 {
                let eps = 1e-6;
                let mut tp = th.clone();
                tp[k] += eps;
                let mut tm = th.clone();
                tm[k] -= eps;
                let fd = (obj.value(&tp) - obj.value(&tm)) / (2.0 * eps);
                let rel = (fd - g[k]).abs() / g[k].abs().max(1e-3);
                assert!(rel <= 1e-5, "component {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn objective_is_midpoint_convex() {
        let (h, om) = random_problem(50, 5);
        let st = standardize(&h, &[0, 1], &[true; 50]);
        let obj = SurrogateObjective {
            design: &st.design,
            omega: &om,
            lambda: 0.01,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let a: Vec<f64> = (0..3).map(|_| 6.0 * rng.random::<f64>() - 3.0).collect();
            let b: Vec<f64> = (0..3).map(|_| 6.0 * rng.random::<f64>() - 3.0).collect();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            assert!(obj.value(&mid) <= 0.5 * (obj.value(&a) + obj.value(&b)) + 1e-10);
        }
    }

    #[test]
    fn scaling_omega_and_penalty_keeps_minimizer() {
        let (h, om) = random_problem(120, 7);
        let mut scaled = om.clone();
        scaled.plus.iter_mut().for_each(|v| *v *= 3.0);
        scaled.minus.iter_mut().for_each(|v| *v *= 3.0);
        let a = fit_rule(&om, &h, &[1], &["X1_2".into()], Penalty::Fixed(0.01)).unwrap();
        let b = fit_rule(&scaled, &h, &[1], &["X1_2".into()], Penalty::Fixed(0.03)).unwrap();
        assert!((a.rule.intercept - b.rule.intercept).abs() < 1e-6);
        assert!((a.rule.coef[0] - b.rule.coef[0]).abs() < 1e-6);
    }

    #[test]
    fn degenerate_table_gives_constant_plus() {
        let h = DMatrix::from_element(5, 1, 0.3);
        let fit = fit_rule(
            &table(vec![0.0; 5], vec![0.0; 5]),
            &h,
            &[0],
            &["x".into()],
            Penalty::Auto,
        )
        .unwrap();
        assert!(fit.diagnostic.is_some());
        assert_eq!(fit.rule.decide(&[0.3]), Arm::Plus);
    }

    #[test]
    fn zero_weight_rows_do_not_matter() {
        let (h, mut om) = random_problem(60, 8);
        let a = fit_rule(&om, &h, &[1], &["X1_2".into()], Penalty::Fixed(0.01)).unwrap();
        for i in (0..60).filter(|i| i % 7 == 0) {
            om.plus[i] = 1e6;
            om.minus[i] = -1e6;
        }
        let b = fit_rule(&om, &h, &[1], &["X1_2".into()], Penalty::Fixed(0.01)).unwrap();
        assert_eq!(a.rule, b.rule);
    }
}
