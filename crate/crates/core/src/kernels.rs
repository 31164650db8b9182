//! Reproducing kernels of the tensor-product Sobolev space on the unit cube,
//! plus the Gaussian product kernel used for local smoothing.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{RegimeError, Result};

const DOMAIN_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub order: u32,
    pub dim: usize,
}

impl KernelSpec {
    /// Only second-order Sobolev spaces are supported.
    pub fn new(order: u32, dim: usize) -> Result<Self> {
        if order != 2 {
            return Err(RegimeError::Config(format!(
                "Sobolev order {order} unsupported (only 2)"
            )));
        }
        if dim == 0 {
            return Err(RegimeError::Config("kernel dimension must be positive".into()));
        }
        Ok(KernelSpec { order, dim })
    }

    pub fn second_order(dim: usize) -> Result<Self> {
        Self::new(2, dim)
    }
}

// Scaled Bernoulli polynomials k_r = B_r / r!, written in terms of k1.
fn k1(x: f64) -> f64 {
    x - 0.5
}

fn k2(x: f64) -> f64 {
    let a = k1(x);
    (a * a - 1.0 / 12.0) / 2.0
}

fn k4(x: f64) -> f64 {
    let a2 = k1(x).powi(2);
    (a2 * a2 - a2 / 2.0 + 7.0 / 240.0) / 24.0
}

/// One-dimensional kernel of the second-order Sobolev space with norm
/// `(∫f)^2 + (∫f')^2 + ∫(f'')^2`.
pub fn sobolev_1d(s: f64, u: f64) -> f64 {
    1.0 + k1(s) * k1(u) + k2(s) * k2(u) - k4((s - u).abs())
}

fn check_unit(x: &[f64]) -> Result<()> {
    if let Some(v) = x.iter().find(|&&v| !(-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&v)) {
        return Err(RegimeError::Domain(format!("coordinate {v} outside the unit interval")));
    }
    Ok(())
}

pub fn sobolev_kernel(x: &[f64], y: &[f64], spec: &KernelSpec) -> Result<f64> {
    if x.len() != spec.dim || y.len() != spec.dim {
        return Err(RegimeError::Domain(format!(
            "points of dimension {}/{} for a {}-dimensional kernel",
            x.len(),
            y.len(),
            spec.dim
        )));
    }
    check_unit(x)?;
    check_unit(y)?;
    Ok(product_kernel(x, y))
}

#[inline]
fn product_kernel(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(&a, &b)| sobolev_1d(a, b)).product()
}

#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub k: DMatrix<f64>,
    /// The point set, one point per row.
    pub points: DMatrix<f64>,
}

impl GramMatrix {
    pub fn len(&self) -> usize {
        self.k.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.nrows() == 0
    }

    /// Smallest and largest eigenvalue.
    pub fn eigen_range(&self) -> (f64, f64) {
        let ev = SymmetricEigen::new(self.k.clone()).eigenvalues;
        (ev.min(), ev.max())
    }

    pub fn jitter(&self) -> f64 {
        1e-10 * self.k.trace() / self.len().max(1) as f64
    }
}

fn rows_in_unit_cube(points: &DMatrix<f64>) -> Result<()> {
    if let Some(v) = points.iter().find(|&&v| !(-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&v)) {
        return Err(RegimeError::Domain(format!("coordinate {v} outside the unit interval")));
    }
    Ok(())
}

pub fn gram_matrix(points: &DMatrix<f64>, spec: &KernelSpec) -> Result<GramMatrix> {
    if points.nrows() == 0 {
        return Err(RegimeError::Data("empty point set".into()));
    }
    if points.ncols() != spec.dim {
        return Err(RegimeError::Domain("point dimension does not match kernel".into()));
    }
    rows_in_unit_cube(points)?;
    let n = points.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| points.row(i).iter().copied().collect()).collect();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = product_kernel(&rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(GramMatrix {
        k,
        points: points.clone(),
    })
}

/// `K[i][j] = k(a_i, b_j)`.
pub fn cross_gram(a: &DMatrix<f64>, b: &DMatrix<f64>, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    if a.ncols() != spec.dim || b.ncols() != spec.dim {
        return Err(RegimeError::Domain("point dimension does not match kernel".into()));
    }
    rows_in_unit_cube(a)?;
    rows_in_unit_cube(b)?;
    let br: Vec<Vec<f64>> = (0..b.nrows()).map(|j| b.row(j).iter().copied().collect()).collect();
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..a.nrows() {
        let ai: Vec<f64> = a.row(i).iter().copied().collect();
        for (j, bj) in br.iter().enumerate() {
            out[(i, j)] = product_kernel(&ai, bj);
        }
    }
    Ok(out)
}

/// Kernel values between one point and a set of points (rows).
pub fn kernel_row(x: &[f64], points: &DMatrix<f64>) -> Vec<f64> {
    (0..points.nrows())
        .map(|j| {
            x.iter()
                .enumerate()
                .map(|(d, &a)| sobolev_1d(a, points[(j, d)]))
                .product()
        })
        .collect()
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Product Gaussian kernel `∏ φ((u_j - u0_j)/c_j) / c_j`.
pub fn smoothing_weight(u: &[f64], u0: &[f64], bandwidth: &[f64]) -> Result<f64> {
    if bandwidth.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
        return Err(RegimeError::Config("bandwidths must be positive and finite".into()));
    }
    if u.len() != u0.len() || u.len() != bandwidth.len() {
        return Err(RegimeError::Domain("smoothing weight dimension mismatch".into()));
    }
    Ok(gaussian_product(u, u0, bandwidth))
}

#[inline]
pub(crate) fn gaussian_product(u: &[f64], u0: &[f64], bandwidth: &[f64]) -> f64 {
    u.iter()
        .zip(u0)
        .zip(bandwidth)
        .map(|((&a, &b), &c)| {
            let z = (a - b) / c;
            INV_SQRT_2PI * (-0.5 * z * z).exp() / c
        })
        .product()
}
