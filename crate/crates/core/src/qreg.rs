//! Weighted smoothing-spline regression in the Sobolev RKHS.
//!
//! Minimises `Σ ω_i (y_i - c - f(h_i))^2 + λ ||f||_Q^2` with an unpenalised
//! intercept `c`. With `S = diag(sqrt ω)` and `S K S = V Λ V'` every λ on the
//! GCV grid is solved from one eigendecomposition.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data_model::Arm;
use crate::error::{RegimeError, Result};
use crate::kernels::{gram_matrix, kernel_row, KernelSpec};
use crate::rule_search::DecisionRule;

/// A fixed penalty or automatic selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Penalty {
    Fixed(f64),
    Auto,
}

pub fn spline_lambda_grid() -> Vec<f64> {
    (-6..=1).map(|k| 10f64.powi(k)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QModel {
    pub arm: Arm,
    pub points: DMatrix<f64>,
    pub alpha: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub weights: Vec<f64>,
    pub spec: KernelSpec,
}

impl QModel {
    /// Prediction at a point already mapped to the unit cube.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let k = kernel_row(x, &self.points);
        self.intercept + k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict_rows(&self, rows: &DMatrix<f64>) -> Vec<f64> {
        (0..rows.nrows())
            .map(|i| self.predict(&rows.row(i).iter().copied().collect::<Vec<_>>()))
            .collect()
    }
}

struct Spectral {
    sqrt_w: Vec<f64>,
    lambdas: Vec<f64>,
    vectors: DMatrix<f64>,
    /// `V' sqrt(ω)`
    p: DVector<f64>,
    /// `V' sqrt(ω) y`
    q: DVector<f64>,
}

impl Spectral {
    fn intercept(&self, lambda: f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..self.lambdas.len() {
            let inv = 1.0 / (self.lambdas[k] + lambda);
            num += self.p[k] * self.q[k] * inv;
            den += self.p[k] * self.p[k] * inv;
        }
        num / den
    }

    fn gcv(&self, lambda: f64) -> f64 {
        let m = self.lambdas.len() as f64;
        let c = self.intercept(lambda);
        let (mut rss, mut tr_g, mut pg2, mut pg) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..self.lambdas.len() {
            let inv = 1.0 / (self.lambdas[k] + lambda);
            let r = self.q[k] - c * self.p[k];
            rss += r * r * inv * inv;
            tr_g += inv;
            pg2 += self.p[k] * self.p[k] * inv * inv;
            pg += self.p[k] * self.p[k] * inv;
        }
        let rss = lambda * lambda * rss;
        let resid_df = lambda * (tr_g - pg2 / pg);
        (rss / m) / (resid_df / m).powi(2)
    }

    fn alpha(&self, lambda: f64) -> (Vec<f64>, f64) {
        let c = self.intercept(lambda);
        let coef = DVector::from_fn(self.lambdas.len(), |k, _| {
            (self.q[k] - c * self.p[k]) / (self.lambdas[k] + lambda)
        });
        let a = &self.vectors * coef;
        (a.iter().zip(&self.sqrt_w).map(|(v, s)| v * s).collect(), c)
    }
}

/// Fits `y ~ c + f(h)` on rows with positive weight. `histories` must
/// already be rescaled to the unit cube.
pub fn fit_weighted_spline(
    arm: Arm,
    histories: &DMatrix<f64>,
    responses: &[f64],
    case_weights: &[f64],
    spec: &KernelSpec,
    penalty: Penalty,
) -> Result<QModel> {
    let n = histories.nrows();
    if responses.len() != n || case_weights.len() != n {
        return Err(RegimeError::Data("spline inputs have inconsistent lengths".into()));
    }
    if case_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(RegimeError::Config(
            "case weights must be finite and nonnegative".into(),
        ));
    }
    let keep: Vec<usize> = (0..n).filter(|&i| case_weights[i] > 0.0).collect();
    if keep.len() < 2 {
        return Err(RegimeError::Config(
            "spline fit needs at least two rows with positive weight".into(),
        ));
    }
    if keep.iter().any(|&i| !responses[i].is_finite()) {
        return Err(RegimeError::Data("non-finite spline response".into()));
    }
    if let Penalty::Fixed(l) = penalty {
        if !(l >= 0.0) {
            return Err(RegimeError::Config("spline penalty must be nonnegative".into()));
        }
    }
    let points = histories.select_rows(&keep);
    let y: Vec<f64> = keep.iter().map(|&i| responses[i]).collect();
    let w: Vec<f64> = keep.iter().map(|&i| case_weights[i]).collect();
    let m = keep.len();

    let gram = gram_matrix(&points, spec)?;
    let sqrt_w: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let mut kt = gram.k.clone();
    for i in 0..m {
        for j in 0..m {
            kt[(i, j)] *= sqrt_w[i] * sqrt_w[j];
        }
    }
    let jitter = gram.jitter();
    for i in 0..m {
        kt[(i, i)] += jitter * w[i];
    }
    let eig = SymmetricEigen::new(kt);
    let lambdas: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    let sw = DVector::from_vec(sqrt_w.clone());
    let swy = DVector::from_fn(m, |i, _| sqrt_w[i] * y[i]);
    let spectral = Spectral {
        p: eig.eigenvectors.tr_mul(&sw),
        q: eig.eigenvectors.tr_mul(&swy),
        vectors: eig.eigenvectors,
        lambdas,
        sqrt_w,
    };

    let lambda = match penalty {
        Penalty::Fixed(l) => l,
        Penalty::Auto => {
            let mut best = (f64::INFINITY, 0.0);
            for l in spline_lambda_grid() {
                let g = spectral.gcv(l);
                if g.is_finite() && g < best.0 {
                    best = (g, l);
                }
            }
            if !best.0.is_finite() {
                return Err(RegimeError::Numeric("GCV undefined on every grid value".into()));
            }
            best.1
        }
    };
    if lambda == 0.0 && spectral.lambdas.iter().any(|&v| v <= 0.0) {
        return Err(RegimeError::Numeric("singular unpenalised spline system".into()));
    }
    let (alpha, intercept) = spectral.alpha(lambda);
    if !intercept.is_finite() || alpha.iter().any(|a| !a.is_finite()) {
        return Err(RegimeError::Numeric(
            "spline solve produced non-finite coefficients".into(),
        ));
    }
    Ok(QModel {
        arm,
        points,
        alpha,
        intercept,
        lambda,
        weights: w,
        spec: *spec,
    })
}

/// One spline per arm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmModels {
    pub plus: QModel,
    pub minus: QModel,
}

impl ArmModels {
    pub fn get(&self, arm: Arm) -> &QModel {
        match arm {
            Arm::Plus => &self.plus,
            Arm::Minus => &self.minus,
        }
    }
}

/// `Q̂(h, d̂(h))` for every row with `responded`; other rows get `None`.
/// The rule reads raw histories, the models read rescaled ones.
pub fn build_pseudo_outcome(
    models: &ArmModels,
    rule: &DecisionRule,
    raw_histories: &DMatrix<f64>,
    scaled_histories: &DMatrix<f64>,
    responded: &[bool],
) -> Vec<Option<f64>> {
    (0..raw_histories.nrows())
        .map(|i| {
            if !responded[i] {
                return None;
            }
            let raw: Vec<f64> = raw_histories.row(i).iter().copied().collect();
            let scaled: Vec<f64> = scaled_histories.row(i).iter().copied().collect();
            Some(models.get(rule.decide(&raw)).predict(&scaled))
        })
        .collect()
}
