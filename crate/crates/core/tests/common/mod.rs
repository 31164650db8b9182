//! Independent reference computations shared by the integration and
//! acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regime_kit::balancing::{solve_weights, BalanceProblem, KernelSpectrum};
use regime_kit::kernels::{gram_matrix, KernelSpec};

/// Balancing objective from the value-space form
/// `λmax(b b'/n - n λ1 K⁻¹)⁺ + λ2 Σ_arm w² / n`.
pub struct BalanceOracle {
    kinv: DMatrix<f64>,
    in_arm: Vec<bool>,
    lambda_rkhs: f64,
    lambda_weight: f64,
}

impl BalanceOracle {
    pub fn new(k: &DMatrix<f64>, in_arm: &[bool], lambda_rkhs: f64, lambda_weight: f64) -> Self {
        let kinv = k.clone().try_inverse().expect("Gram matrix invertible");
        BalanceOracle {
            kinv,
            in_arm: in_arm.to_vec(),
            lambda_rkhs,
            lambda_weight,
        }
    }

    /// `arm_w` holds the weights of the in-arm rows, in row order.
    pub fn objective(&self, arm_w: &[f64]) -> f64 {
        let n = self.in_arm.len();
        let nf = n as f64;
        let mut b = vec![-1.0; n];
        let mut it = arm_w.iter();
        let mut pen = 0.0;
        for (bi, &inside) in b.iter_mut().zip(&self.in_arm) {
            if inside {
                let w = *it.next().unwrap();
                *bi = w - 1.0;
                pen += w * w;
            }
        }
        let m = DMatrix::from_fn(n, n, |i, j| {
            b[i] * b[j] / nf - nf * self.lambda_rkhs * self.kinv[(i, j)]
        });
        let m = (&m + m.transpose()) * 0.5;
        let top = SymmetricEigen::new(m).eigenvalues.max();
        top.max(0.0) + self.lambda_weight * pen / nf
    }

    /// Multi-resolution exhaustive grid search over `[1, upper]^m`.
    pub fn grid_min(&self, upper: f64) -> (f64, Vec<f64>) {
        let m = self.in_arm.iter().filter(|&&b| b).count();
        let mut lo = vec![1.0; m];
        let mut hi = vec![upper; m];
        let mut best = (f64::INFINITY, vec![1.0; m]);
        for (level, pts) in [(0, 31usize), (1, 15), (2, 15), (3, 15), (4, 15), (5, 15)] {
            let steps: Vec<f64> = (0..m).map(|j| (hi[j] - lo[j]) / (pts - 1) as f64).collect();
            let total = pts.pow(m as u32);
            for idx in 0..total {
                let mut r = idx;
                let w: Vec<f64> = (0..m)
                    .map(|j| {
                        let k = r % pts;
                        r /= pts;
                        lo[j] + k as f64 * steps[j]
                    })
                    .collect();
                let f = self.objective(&w);
                if f < best.0 {
                    best = (f, w);
                }
            }
            let _ = level;
            for j in 0..m {
                lo[j] = (best.1[j] - 2.0 * steps[j]).max(1.0);
                hi[j] = best.1[j] + 2.0 * steps[j];
            }
        }
        best
    }
}

pub struct BalanceInstance {
    pub points: DMatrix<f64>,
    pub in_arm: Vec<bool>,
    pub lambda_rkhs: f64,
    pub lambda_weight: f64,
}

pub fn random_balance_instance(rng: &mut ChaCha8Rng) -> BalanceInstance {
    let n = rng.random_range(2..=5usize);
    let p = rng.random_range(1..=2usize);
    let points = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>());
    let arm_size = rng.random_range(1..=n.min(3));
    let mut in_arm = vec![false; n];
    let mut chosen = 0;
    while chosen < arm_size {
        let i = rng.random_range(0..n);
        if !in_arm[i] {
            in_arm[i] = true;
            chosen += 1;
        }
    }
    let lambda_rkhs = [1e-4, 1e-3, 1e-2][rng.random_range(0..3)];
    let lambda_weight = [1e-2, 1e-1, 1.0][rng.random_range(0..3)];
    BalanceInstance {
        points,
        in_arm,
        lambda_rkhs,
        lambda_weight,
    }
}

pub struct BalanceComparison {
    pub solver: f64,
    pub grid: f64,
    pub solver_at_oracle: f64,
    pub min_weight: f64,
}

pub fn compare_balance(inst: &BalanceInstance) -> BalanceComparison {
    let spec = KernelSpec::second_order(inst.points.ncols()).unwrap();
    let gram = gram_matrix(&inst.points, &spec).unwrap();
    let spectrum = KernelSpectrum::new(&gram).unwrap();
    let problem = BalanceProblem {
        histories: &inst.points,
        in_arm: &inst.in_arm,
        spectrum: &spectrum,
        lambda_rkhs: inst.lambda_rkhs,
        lambda_weight: inst.lambda_weight,
    };
    let fit = solve_weights(&problem).unwrap();
    let oracle = BalanceOracle::new(&gram.k, &inst.in_arm, inst.lambda_rkhs, inst.lambda_weight);
    let arm_w: Vec<f64> = (0..inst.in_arm.len())
        .filter(|&i| inst.in_arm[i])
        .map(|i| fit.weights[i])
        .collect();
    let n = inst.in_arm.len() as f64;
    let (grid, _) = oracle.grid_min(1.0 + 3.0 * n);
    BalanceComparison {
        solver: fit.objective,
        grid,
        solver_at_oracle: oracle.objective(&arm_w),
        min_weight: arm_w.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian-product kernel response rate `Σ r K / Σ K` at `u0`.
pub fn smoothed_response_rate(u: &DMatrix<f64>, r: &[bool], u0: &[f64], bw: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..u.nrows() {
        let mut k = 1.0;
        for j in 0..u.ncols() {
            let z = (u[(i, j)] - u0[j]) / bw[j];
            k *= (-0.5 * z * z).exp() / ((2.0 * std::f64::consts::PI).sqrt() * bw[j]);
        }
        den += k;
        if r[i] {
            num += k;
        }
    }
    num / den
}

/// Largest relative discrepancy between `grad` and central differences.
pub fn max_fd_rel_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let h = 1e-6 * x[k].abs().max(1.0);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += h;
        xm[k] -= h;
        let fd = (f(&xp) - f(&xm)) / (2.0 * h);
        let scale = grad[k].abs().max(fd.abs()).max(1e-8);
        worst = worst.max((fd - grad[k]).abs() / scale);
    }
    worst
}
