//! Covariate-functional balancing weights for one treatment arm.
//!
//! For weights `w` define the residual `b_i = I(A_i = a) w_i - 1`. Restricting
//! the balance function to the span of the kernel sections at the sample
//! points and writing its values as `v = U c` in the Gram eigenbasis
//! `K = U diag(d) U'`, the penalised worst-case imbalance
//!
//! ```text
//! sup_q  F(w, q) / ||q||_n^2  -  λ1 ||q||_Q^2 / ||q||_n^2
//! ```
//!
//! is the largest eigenvalue of `g g' / n - diag(n λ1 / d)` with `g = U' b`.
//! That matrix is diagonal plus rank one, so the eigenvalue is the root of a
//! secular equation. The trivial function contributes zero, so the supremum
//! is floored at 0. The outer minimisation over `w >= 1` is a convex problem
//! solved by projected gradient descent.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{RegimeError, Result};
use crate::kernels::GramMatrix;

const MAX_ITER: usize = 2000;
const MAX_BACKTRACK: usize = 50;
const REL_TOL: f64 = 1e-7;
const ARMIJO: f64 = 1e-4;

/// Eigen-decomposition of a Gram matrix, shared by every λ on a grid.
#[derive(Clone, Debug)]
pub struct KernelSpectrum {
    pub values: Vec<f64>,
    /// `n x r`, columns are eigenvectors for `values`.
    pub vectors: DMatrix<f64>,
    pub n: usize,
}

impl KernelSpectrum {
    pub fn new(gram: &GramMatrix) -> Result<Self> {
        let n = gram.len();
        let jitter = gram.jitter();
        let mut k = gram.k.clone();
        for i in 0..n {
            k[(i, i)] += jitter;
        }
        let eig = SymmetricEigen::new(k);
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(max > 0.0) || min < -1e-8 * max {
            return Err(RegimeError::Numeric(format!(
                "Gram matrix not positive semidefinite (eigenvalues in [{min:e}, {max:e}])"
            )));
        }
        let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 1e-12 * max).collect();
        let values = keep.iter().map(|&i| eig.eigenvalues[i]).collect();
        let vectors = eig.eigenvectors.select_columns(&keep);
        Ok(KernelSpectrum { values, vectors, n })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BalanceProblem<'a> {
    /// Rescaled histories, one row per sample member.
    pub histories: &'a DMatrix<f64>,
    pub in_arm: &'a [bool],
    pub spectrum: &'a KernelSpectrum,
    pub lambda_rkhs: f64,
    pub lambda_weight: f64,
}

impl BalanceProblem<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.in_arm.len();
        if self.histories.nrows() != n || self.spectrum.n != n {
            return Err(RegimeError::Data("balance problem dimensions disagree".into()));
        }
        if !(self.lambda_rkhs > 0.0 && self.lambda_weight > 0.0) {
            return Err(RegimeError::Config("balancing penalties must be positive".into()));
        }
        if !self.in_arm.iter().any(|&b| b) {
            return Err(RegimeError::Data("treatment arm is empty".into()));
        }
        Ok(())
    }

    /// Objective value and gradient with respect to every row weight
    /// (entries outside the arm are zero).
    pub fn objective(&self, weights: &[f64]) -> (f64, f64, DVector<f64>) {
        let n = self.in_arm.len();
        let nf = n as f64;
        let b = DVector::from_fn(n, |i, _| if self.in_arm[i] { weights[i] - 1.0 } else { -1.0 });
        let (sup, grad_b) = sup_term(self.spectrum, &b, self.lambda_rkhs);
        let mut penalty = 0.0;
        let mut grad = grad_b;
        for i in 0..n {
            if self.in_arm[i] {
                penalty += weights[i] * weights[i];
                grad[i] += 2.0 * self.lambda_weight * weights[i] / nf;
            } else {
                grad[i] = 0.0;
            }
        }
        (sup + self.lambda_weight * penalty / nf, sup, grad)
    }
}

/// Penalised worst-case imbalance (floored at 0) and its gradient in `b`.
pub fn sup_term(spectrum: &KernelSpectrum, b: &DVector<f64>, lambda_rkhs: f64) -> (f64, DVector<f64>) {
    let nf = spectrum.n as f64;
    let g = spectrum.vectors.tr_mul(b);
    let e: Vec<f64> = spectrum.values.iter().map(|&d| nf * lambda_rkhs / d).collect();
    let psi = |mu: f64| -> (f64, f64) {
        let mut s = 0.0;
        let mut ds = 0.0;
        for (gk, ek) in g.iter().zip(&e) {
            let den = mu + ek;
            let t = gk * gk / den;
            s += t;
            ds += t / den;
        }
        (s / nf - 1.0, -ds / nf)
    };
    let (p0, _) = psi(0.0);
    if p0 <= 0.0 {
        return (0.0, DVector::zeros(spectrum.n));
    }
    // psi is convex and decreasing on [0, inf): Newton from the left is monotone.
    let mut mu = 0.0;
    for _ in 0..200 {
        let (p, dp) = psi(mu);
        let step = -p / dp;
        mu += step;
        if p.abs() <= 1e-15 || step.abs() <= 1e-15 * mu.max(1e-300) {
            break;
        }
    }
    let mut c = DVector::from_fn(g.len(), |k, _| g[k] / (mu + e[k]));
    let norm = c.norm();
    if norm == 0.0 {
        return (mu.max(0.0), DVector::zeros(spectrum.n));
    }
    c /= norm;
    let gc = g.dot(&c);
    let grad = &spectrum.vectors * c * (2.0 * gc / nf);
    (mu, grad)
}

/// `( mean_i [ (I(A_i = a) w_i - 1) q(h_i) ] )^2`.
pub fn imbalance(weights: &[f64], in_arm: &[bool], q_values: &[f64]) -> f64 {
    let n = q_values.len();
    let s: f64 = (0..n)
        .map(|i| {
            let wi = if in_arm[i] { weights[i] } else { 0.0 };
            (wi - 1.0) * q_values[i]
        })
        .sum();
    (s / n as f64).powi(2)
}

/// Worst standardized imbalance over coordinate projections and pairwise
/// products (squares included).
pub fn worst_standardized_imbalance(histories: &DMatrix<f64>, in_arm: &[bool], weights: &[f64]) -> f64 {
    let n = histories.nrows();
    let p = histories.ncols();
    let nf = n as f64;
    let resid: Vec<f64> = (0..n)
        .map(|i| if in_arm[i] { weights[i] - 1.0 } else { -1.0 })
        .collect();
    let score = |f: &dyn Fn(usize) -> f64| -> f64 {
        let vals: Vec<f64> = (0..n).map(f).collect();
        let mean = vals.iter().sum::<f64>() / nf;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf).sqrt();
        if sd < 1e-12 {
            return 0.0;
        }
        let m: f64 = vals.iter().zip(&resid).map(|(v, r)| v * r).sum::<f64>() / nf;
        m.abs() / sd
    };
    let mut worst = 0.0f64;
    for j in 0..p {
        worst = worst.max(score(&|i| histories[(i, j)]));
        for k in j..p {
            worst = worst.max(score(&|i| histories[(i, j)] * histories[(i, k)]));
        }
    }
    worst
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BalancingWeights {
    /// One entry per sample row; rows outside the arm hold 0.
    pub weights: Vec<f64>,
    pub objective: f64,
    pub sup_term: f64,
    pub max_imbalance: f64,
    pub report: SolveReport,
}

pub fn solve_weights(problem: &BalanceProblem) -> Result<BalancingWeights> {
    solve_weights_from(problem, None)
}

/// Projected gradient descent with Barzilai-Borwein trial steps and Armijo
/// backtracking; `start` defaults to `w = 1`.
pub fn solve_weights_from(problem: &BalanceProblem, start: Option<&[f64]>) -> Result<BalancingWeights> {
    problem.validate()?;
    let n = problem.in_arm.len();
    let arm = problem.in_arm;
    let project = |w: &mut [f64]| {
        for i in 0..n {
            w[i] = if arm[i] { w[i].max(1.0) } else { 0.0 };
        }
    };
    let mut w: Vec<f64> = match start {
        Some(s) => s.to_vec(),
        None => vec![1.0; n],
    };
    project(&mut w);
    let (mut f, mut sup, mut grad) = problem.objective(&w);
    let mut report = SolveReport::default();
    let gmax = grad.amax();
    let mut step = if gmax > 0.0 { 1.0 / gmax } else { 1.0 };

    for iter in 0..MAX_ITER {
        report.iterations = iter + 1;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let mut trial: Vec<f64> = (0..n).map(|i| w[i] - step * grad[i]).collect();
            project(&mut trial);
            let dir: f64 = (0..n).map(|i| grad[i] * (trial[i] - w[i])).sum();
            if dir == 0.0 {
                // projected gradient vanishes
                report.converged = true;
                return Ok(finish(problem, w, f, sup, report));
            }
            let (ft, st, gt) = problem.objective(&trial);
            if ft <= f + ARMIJO * dir {
                accepted = Some((trial, ft, st, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((w_new, f_new, sup_new, g_new)) = accepted else {
            report.warning = Some(format!(
                "no decrease after {MAX_BACKTRACK} backtracks at iteration {}",
                iter + 1
            ));
            return Ok(finish(problem, w, f, sup, report));
        };
        let rel = (f - f_new).abs() / f.abs().max(1e-12);
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..n {
            let s = w_new[i] - w[i];
            ss += s * s;
            sy += s * (g_new[i] - grad[i]);
        }
        step = if sy > 0.0 { ss / sy } else { step * 2.0 };
        w = w_new;
        f = f_new;
        sup = sup_new;
        grad = g_new;
        if rel < REL_TOL {
            report.converged = true;
            return Ok(finish(problem, w, f, sup, report));
        }
    }
    report.warning = Some(format!("iteration limit {MAX_ITER} reached"));
    Ok(finish(problem, w, f, sup, report))
}

fn finish(
    problem: &BalanceProblem,
    weights: Vec<f64>,
    objective: f64,
    sup: f64,
    report: SolveReport,
) -> BalancingWeights {
    let max_imbalance = worst_standardized_imbalance(problem.histories, problem.in_arm, &weights);
    BalancingWeights {
        weights,
        objective,
        sup_term: sup,
        max_imbalance,
        report,
    }
}

/// All pairs `(10^a, 10^b)` for `a` in `rkhs_exps` and `b` in `weight_exps`.
pub fn lambda_grid(
    rkhs_exps: std::ops::RangeInclusive<i32>,
    weight_exps: std::ops::RangeInclusive<i32>,
) -> Vec<(f64, f64)> {
    rkhs_exps
        .flat_map(|a| weight_exps.clone().map(move |b| (10f64.powi(a), 10f64.powi(b))))
        .collect()
}

/// `λ₁ ∈ {10^-8, ..., 10^-3}`, `λ₂ ∈ {10^-4, ..., 10}`: 36 pairs.
pub fn default_lambda_grid() -> Vec<(f64, f64)> {
    lambda_grid(-8..=-3, -4..=1)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TunedBalance {
    pub lambda_rkhs: f64,
    pub lambda_weight: f64,
    pub weights: BalancingWeights,
}

/// Picks the grid pair whose weights minimise the worst standardized
/// imbalance; ties go to the larger weight penalty.
pub fn tune_balance_params(
    histories: &DMatrix<f64>,
    in_arm: &[bool],
    spectrum: &KernelSpectrum,
    grid: &[(f64, f64)],
) -> Result<TunedBalance> {
    if grid.is_empty() {
        return Err(RegimeError::Config("empty balancing grid".into()));
    }
    let mut best: Option<TunedBalance> = None;
    for &(l1, l2) in grid {
        let problem = BalanceProblem {
            histories,
            in_arm,
            spectrum,
            lambda_rkhs: l1,
            lambda_weight: l2,
        };
        let sol = solve_weights(&problem)?;
        let better = match &best {
            None => true,
            Some(b) => {
                let (c, bc) = (sol.max_imbalance, b.weights.max_imbalance);
                let tie = (c - bc).abs() <= 1e-12 * bc.abs().max(1e-300);
                if tie {
                    l2 > b.lambda_weight
                } else {
                    c < bc
                }
            }
        };
        if better {
            best = Some(TunedBalance {
                lambda_rkhs: l1,
                lambda_weight: l2,
                weights: sol,
            });
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Combines per-arm solutions into one weight per row.
pub fn merge_arms(in_plus: &[bool], plus: &[f64], minus: &[f64]) -> Vec<f64> {
    in_plus
        .iter()
        .enumerate()
        .map(|(i, &p)| if p { plus[i] } else { minus[i] })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram_matrix, KernelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, Vec<bool>, KernelSpectrum) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>());
        let arm: Vec<bool> = (0..n).map(|i| (h[(i, 0)] + rng.random::<f64>() * 0.5) > 0.6).collect();
        let g = gram_matrix(&h, &KernelSpec::second_order(p).unwrap()).unwrap();
        let s = KernelSpectrum::new(&g).unwrap();
        (h, arm, s)
    }

    // Independent dense route: largest eigenvalue of b b'/n - n λ1 K^{-1}.
    fn dense_sup(h: &DMatrix<f64>, arm: &[bool], w: &[f64], l1: f64) -> f64 {
        let n = h.nrows();
        let g = gram_matrix(h, &KernelSpec::second_order(h.ncols()).unwrap()).unwrap();
        let kinv = g.k.clone().try_inverse().unwrap();
        let b = DVector::from_fn(n, |i, _| if arm[i] { w[i] - 1.0 } else { -1.0 });
        let m = &b * b.transpose() / n as f64 - kinv * (n as f64 * l1);
        SymmetricEigen::new(m).eigenvalues.max().max(0.0)
    }

    #[test]
    fn imbalance_examples() {
        assert_eq!(imbalance(&[1.0; 3], &[true; 3], &[0.3, -1.0, 2.0]), 0.0);
        let v = imbalance(&[2.0, 0.0], &[true, false], &[0.2, 0.4]);
        assert!((v - 0.01).abs() < 1e-15);
        assert_eq!(imbalance(&[3.0, 0.0], &[true, false], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn all_rows_in_arm() {
        let (h, _, s) = setup(8, 2, 1);
        let arm = vec![true; 8];
        let p = BalanceProblem {
            histories: &h,
            in_arm: &arm,
            spectrum: &s,
            lambda_rkhs: 0.1,
            lambda_weight: 0.3,
        };
        let sol = solve_weights(&p).unwrap();
        assert!(sol.weights.iter().all(|&w| (w - 1.0).abs() < 1e-12));
        assert!((sol.objective - 0.3).abs() < 1e-12);
    }

    #[test]
    fn secular_root_matches_dense_eigenvalue() {
        let (h, arm, s) = setup(12, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let w: Vec<f64> = arm
                .iter()
                .map(|&a| if a { 1.0 + 3.0 * rng.random::<f64>() } else { 0.0 })
                .collect();
            let b = DVector::from_fn(12, |i, _| if arm[i] { w[i] - 1.0 } else { -1.0 });
            for l1 in [1e-3, 1e-2, 0.1] {
                let (v, _) = sup_term(&s, &b, l1);
                let d = dense_sup(&h, &arm, &w, l1);
                assert!((v - d).abs() < 1e-6 * d.max(1.0), "{v} vs {d}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (h, arm, s) = setup(10, 2, 3);
        let p = BalanceProblem {
            histories: &h,
            in_arm: &arm,
            spectrum: &s,
            lambda_rkhs: 1e-3,
            lambda_weight: 0.05,
        };
        let w: Vec<f64> = arm
            .iter()
            .enumerate()
            .map(|(i, &a)| if a { 1.5 + 0.1 * i as f64 } else { 0.0 })
            .collect();
        let (f0, sup, g) = p.objective(&w);
        assert!(sup > 0.0);
        for i in (0..10).filter(|&i| arm[i]) {
            let eps = 1e-6;
            let mut wp = w.clone();
            wp[i] += eps;
            let mut wm = w.clone();
            wm[i] -= eps;
            let fd = (p.objective(&wp).0 - p.objective(&wm).0) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i]);
        }
        assert!(f0.is_finite());
    }

    #[test]
    fn feasible_and_descends() {
        let (h, arm, s) = setup(60, 2, 21);
        for (l1, l2) in [(1e-3, 1e-3), (0.1, 0.1), (10.0, 1.0)] {
            let p = BalanceProblem {
                histories: &h,
                in_arm: &arm,
                spectrum: &s,
                lambda_rkhs: l1,
                lambda_weight: l2,
            };
            let sol = solve_weights(&p).unwrap();
            let (f1, _, _) = p.objective(&arm.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect::<Vec<_>>());
            assert!(sol.objective <= f1 + 1e-9);
            for (i, &a) in arm.iter().enumerate() {
                if a {
                    assert!(sol.weights[i] >= 1.0 - 1e-12);
                } else {
                    assert_eq!(sol.weights[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn constant_balance_improves() {
        let (h, arm, s) = setup(80, 2, 4);
        let p = BalanceProblem {
            histories: &h,
            in_arm: &arm,
            spectrum: &s,
            lambda_rkhs: 1e-3,
            lambda_weight: 1e-3,
        };
        let sol = solve_weights(&p).unwrap();
        let n = 80.0;
        let m0: f64 = arm.iter().filter(|&&a| a).count() as f64 / n;
        let m1: f64 = sol.weights.iter().sum::<f64>() / n;
        assert!((m1 - 1.0).abs() < (m0 - 1.0).abs());
    }

    #[test]
    fn tuning_single_element_and_ties() {
        let (h, arm, s) = setup(30, 2, 8);
        let t = tune_balance_params(&h, &arm, &s, &[(0.5, 0.25)]).unwrap();
        assert_eq!((t.lambda_rkhs, t.lambda_weight), (0.5, 0.25));
        // Huge penalties pin w = 1 regardless of the other penalty: identical criteria.
        let t = tune_balance_params(&h, &arm, &s, &[(1e8, 1e8), (1e8, 1e9)]).unwrap();
        assert_eq!(t.lambda_weight, 1e9);
        assert!(tune_balance_params(&h, &arm, &s, &[]).is_err());
    }

    #[test]
    fn grid_has_36_pairs() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 36);
        assert!(g.contains(&(1e-8, 1e-4)));
        assert!(g.contains(&(1e-3, 1e1)));
        assert_eq!(lambda_grid(-3..=2, -3..=2).len(), 36);
    }
}
