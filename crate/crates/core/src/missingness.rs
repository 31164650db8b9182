//! Semiparametric propensity for a nonignorably missing pseudo-outcome:
//! `P(R = 0 | u, y) / P(R = 1 | u, y) = exp{η(u) + Γ_γ(y)}` with `η`
//! profiled out by kernel smoothing and `γ` fitted by two-step GMM on
//! nonresponse instruments.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{RegimeError, Result};
use crate::kernels::gaussian_product;

pub const PROPENSITY_FLOOR: f64 = 0.01;
const EXP_CAP: f64 = 700.0;
const NM_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum GammaFamily {
    /// `γ y`
    #[default]
    Linear,
    /// `γ0 y + γ1 y²`
    Quadratic,
    /// `γ sgn(y) log(1 + |y|)`
    Log,
}

impl GammaFamily {
    pub fn dim(self) -> usize {
        match self {
            GammaFamily::Quadratic => 2,
            _ => 1,
        }
    }

    pub fn eval(self, gamma: &[f64], y: f64) -> f64 {
        match self {
            GammaFamily::Linear => gamma[0] * y,
            GammaFamily::Quadratic => gamma[0] * y + gamma[1] * y * y,
            GammaFamily::Log => gamma[0] * y.signum() * y.abs().ln_1p(),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "linear" => Ok(GammaFamily::Linear),
            "quadratic" => Ok(GammaFamily::Quadratic),
            "log" => Ok(GammaFamily::Log),
            other => Err(RegimeError::Config(format!("unknown gamma family '{other}'"))),
        }
    }
}

/// Rows of a stage sample seen by the missingness model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MissingnessRows {
    /// Smoothing covariates, `m × d_u`.
    pub u: DMatrix<f64>,
    /// Nonresponse instruments, `m × d_z`.
    pub z: DMatrix<f64>,
    /// Outcome, present exactly when `r` is true.
    pub y: Vec<Option<f64>>,
    pub r: Vec<bool>,
}

impl MissingnessRows {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.r.len();
        if self.u.nrows() != m || self.z.nrows() != m || self.y.len() != m {
            return Err(RegimeError::Data("missingness rows have inconsistent lengths".into()));
        }
        for (i, (y, &r)) in self.y.iter().zip(&self.r).enumerate() {
            match (y, r) {
                (Some(v), true) if v.is_finite() => {}
                (None, false) => {}
                _ => return Err(RegimeError::Data(format!("row {i}: outcome presence disagrees with r"))),
            }
        }
        if !self.r.iter().any(|&r| r) {
            return Err(RegimeError::Data("no observed outcomes".into()));
        }
        Ok(())
    }

    fn u_row(&self, i: usize) -> Vec<f64> {
        self.u.row(i).iter().copied().collect()
    }
}

/// `1.06 · sd · m^{-1/5}` per smoothing coordinate.
pub fn silverman_bandwidths(u: &DMatrix<f64>) -> Vec<f64> {
    let m = u.nrows() as f64;
    (0..u.ncols())
        .map(|j| {
            let col = u.column(j);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            1.06 * sd * m.powf(-0.2)
        })
        .collect()
}

fn capped_exp(x: f64) -> f64 {
    x.min(EXP_CAP).exp()
}

/// `exp{η̂_γ(u0)}`, with a flag set when the denominator vanishes (the
/// value is then 0, i.e. `π̂ = 1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfiledEta {
    pub exp_eta: f64,
    pub clamped: bool,
}

pub fn profile_eta(
    gamma: &[f64],
    family: GammaFamily,
    rows: &MissingnessRows,
    u0: &[f64],
    bandwidth: &[f64],
) -> Result<ProfiledEta> {
    if bandwidth.iter().any(|&c| !(c > 0.0)) {
        return Err(RegimeError::Config("bandwidths must be positive".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..rows.len() {
        let k = gaussian_product(&rows.u_row(i), u0, bandwidth);
        match rows.y[i] {
            Some(y) if rows.r[i] => den += capped_exp(family.eval(gamma, y)) * k,
            _ => num += k,
        }
    }
    if den <= 0.0 || !den.is_finite() {
        return Ok(ProfiledEta {
            exp_eta: 0.0,
            clamped: true,
        });
    }
    Ok(ProfiledEta {
        exp_eta: num / den,
        clamped: false,
    })
}

/// Precomputed kernel matrix between the sample's own smoothing points.
struct Smoother {
    k: DMatrix<f64>,
    missing_mass: Vec<f64>,
}

impl Smoother {
    fn new(rows: &MissingnessRows, bw: &[f64]) -> Self {
        let m = rows.len();
        let pts: Vec<Vec<f64>> = (0..m).map(|i| rows.u_row(i)).collect();
        let mut k = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let v = gaussian_product(&pts[i], &pts[j], bw);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        let miss = DVector::from_fn(m, |i, _| if rows.r[i] { 0.0 } else { 1.0 });
        let missing_mass = (&k * miss).iter().copied().collect();
        Smoother { k, missing_mass }
    }

    /// Per-row contributions `r_i/π̂_γ(u_i, y_i) - 1`.
    fn residuals(&self, gamma: &[f64], family: GammaFamily, rows: &MissingnessRows) -> Vec<f64> {
        let m = rows.len();
        let eg: Vec<f64> = (0..m)
            .map(|i| match rows.y[i] {
                Some(y) if rows.r[i] => capped_exp(family.eval(gamma, y)),
                _ => 0.0,
            })
            .collect();
        let den = &self.k * DVector::from_vec(eg.clone());
        (0..m)
            .map(|i| {
                if !rows.r[i] {
                    return -1.0;
                }
                let e_eta = if den[i] > 0.0 {
                    self.missing_mass[i] / den[i]
                } else {
                    0.0
                };
                (1.0 + e_eta * eg[i]).min(f64::MAX) - 1.0
            })
            .collect()
    }
}

fn instruments(rows: &MissingnessRows, i: usize) -> Vec<f64> {
    let mut l = Vec::with_capacity(rows.z.ncols() + 1);
    l.push(1.0);
    l.extend(rows.z.row(i).iter().copied());
    l
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmReport {
    pub step1_gamma: Vec<f64>,
    pub objective: f64,
    pub j_statistic: f64,
    pub converged: bool,
    pub moment_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MissingnessModel {
    pub family: GammaFamily,
    pub gamma: Vec<f64>,
    pub bandwidth: Vec<f64>,
    pub report: GmmReport,
    pub rows: MissingnessRows,
}

struct Moments<'a> {
    rows: &'a MissingnessRows,
    smoother: Smoother,
    family: GammaFamily,
    inst: Vec<Vec<f64>>,
}

impl Moments<'_> {
    fn contributions(&self, gamma: &[f64]) -> Vec<DVector<f64>> {
        let res = self.smoother.residuals(gamma, self.family, self.rows);
        res.iter()
            .zip(&self.inst)
            .map(|(e, l)| DVector::from_iterator(l.len(), l.iter().map(|v| v * e)))
            .collect()
    }

    fn mean(&self, gamma: &[f64]) -> DVector<f64> {
        let c = self.contributions(gamma);
        let q = self.inst[0].len();
        let mut g = DVector::zeros(q);
        for v in &c {
            g += v;
        }
        g / c.len() as f64
    }

    fn quad(&self, gamma: &[f64], w: &DMatrix<f64>) -> f64 {
        let g = self.mean(gamma);
        let v = (g.transpose() * w * &g)[(0, 0)];
        if v.is_finite() {
            v
        } else {
            f64::MAX
        }
    }
}

/// Nelder-Mead on `f`, returning `(x, f(x), converged)`.
fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], max_evals: usize) -> (Vec<f64>, f64, bool) {
    let d = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for k in 0..d {
        let mut p = x0.to_vec();
        p[k] += if p[k].abs() > 1e-3 { 0.25 * p[k].abs() } else { 0.25 };
        simplex.push(p);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    let mut evals = d + 1;
    let mut converged = false;
    while evals < max_evals {
        let mut idx: Vec<usize> = (0..=d).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        let spread = vals[d] - vals[0];
        let size = simplex[1..]
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&simplex[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if spread <= NM_TOL * (vals[0].abs() + NM_TOL) && size <= NM_TOL.sqrt() {
            converged = true;
            break;
        }
        if size <= 1e-12 {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..d)
            .map(|k| simplex[..d].iter().map(|p| p[k]).sum::<f64>() / d as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            (0..d)
                .map(|k| centroid[k] + t * (simplex[d][k] - centroid[k]))
                .collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                simplex[d] = xe;
                vals[d] = fe;
            } else {
                simplex[d] = xr;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            simplex[d] = xr;
            vals[d] = fr;
        } else {
            let (xc, fc) = if fr < vals[d] {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            evals += 1;
            if fc < vals[d].min(fr) {
                simplex[d] = xc;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    let p: Vec<f64> = (0..d)
                        .map(|k| simplex[0][k] + 0.5 * (simplex[i][k] - simplex[0][k]))
                        .collect();
                    vals[i] = f(&p);
                    simplex[i] = p;
                }
                evals += d;
            }
        }
    }
    let best = (0..=d).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    (simplex[best].clone(), vals[best], converged)
}

/// Gradient steps with central-difference gradients and backtracking.
fn polish(f: &dyn Fn(&[f64]) -> f64, x0: Vec<f64>, f0: f64) -> (Vec<f64>, f64) {
    let d = x0.len();
    let (mut x, mut fx) = (x0, f0);
    for _ in 0..50 {
        let grad: Vec<f64> = (0..d)
            .map(|k| {
                let h = 1e-6 * x[k].abs().max(1.0);
                let mut a = x.clone();
                a[k] += h;
                let mut b = x.clone();
                b[k] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect();
        let gn2: f64 = grad.iter().map(|g| g * g).sum();
        if gn2.sqrt() <= NM_TOL {
            break;
        }
        let mut t = 1.0 / gn2.sqrt().max(1.0);
        let mut improved = false;
        for _ in 0..40 {
            let xt: Vec<f64> = (0..d).map(|k| x[k] - t * grad[k]).collect();
            let ft = f(&xt);
            if ft < fx - 1e-4 * t * gn2 {
                x = xt;
                fx = ft;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (x, fx)
}

fn minimize_with_restarts(f: &dyn Fn(&[f64]) -> f64, gamma0: &[f64]) -> (Vec<f64>, f64, bool) {
    let zero = vec![0.0; gamma0.len()];
    let neg: Vec<f64> = gamma0.iter().map(|g| -g).collect();
    let mut starts = vec![gamma0.to_vec()];
    for s in [zero, neg] {
        if !starts.contains(&s) {
            starts.push(s);
        }
    }
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for s in &starts {
        let (x, fx, conv) = nelder_mead(f, s, 2000);
        let (x, fx) = polish(f, x, fx);
        if best.as_ref().is_none_or(|b| fx < b.1) {
            best = Some((x, fx, conv));
        }
    }
    best.expect("at least one start")
}

fn symmetric_inverse(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = s.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let inv = eig
        .eigenvalues
        .map(|v| if v > 1e-12 * max.max(1e-300) { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Two-step GMM for `γ` with instruments `l(z) = (1, z)`.
pub fn estimate_gamma_gmm(
    rows: &MissingnessRows,
    family: GammaFamily,
    gamma0: &[f64],
    bandwidth: Option<&[f64]>,
) -> Result<MissingnessModel> {
    rows.validate()?;
    let q = rows.z.ncols() + 1;
    if q < family.dim() + 1 {
        return Err(RegimeError::Config(format!(
            "under-identified: {q} moment functions for {} parameters",
            family.dim()
        )));
    }
    if gamma0.len() != family.dim() {
        return Err(RegimeError::Config("initial gamma has the wrong length".into()));
    }
    let bw = match bandwidth {
        Some(b) => b.to_vec(),
        None => silverman_bandwidths(&rows.u),
    };
    if bw.len() != rows.u.ncols() || bw.iter().any(|&c| !(c > 0.0)) {
        return Err(RegimeError::Config(
            "bandwidths must be positive, one per smoothing column".into(),
        ));
    }
    let m = rows.len();
    let moments = Moments {
        rows,
        smoother: Smoother::new(rows, &bw),
        family,
        inst: (0..m).map(|i| instruments(rows, i)).collect(),
    };

    let eye = DMatrix::<f64>::identity(q, q);
    let f1 = |g: &[f64]| moments.quad(g, &eye);
    let (g1, _, _) = minimize_with_restarts(&f1, gamma0);

    let contrib = moments.contributions(&g1);
    let mean = contrib.iter().fold(DVector::zeros(q), |a, v| a + v) / m as f64;
    let mut s = DMatrix::<f64>::zeros(q, q);
    for v in &contrib {
        let c = v - &mean;
        s += &c * c.transpose();
    }
    s /= m as f64;
    let w = symmetric_inverse(&s);
    let f2 = |g: &[f64]| moments.quad(g, &w);
    let (g2, q2, conv) = minimize_with_restarts(&f2, &g1);
    let moment_norm = moments.mean(&g2).norm();

    Ok(MissingnessModel {
        family,
        gamma: g2,
        bandwidth: bw,
        report: GmmReport {
            step1_gamma: g1,
            objective: q2,
            j_statistic: m as f64 * q2,
            converged: conv && q2.is_finite(),
            moment_norm,
        },
        rows: rows.clone(),
    })
}

/// Fitted propensity together with whether the floor was applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Propensity {
    pub value: f64,
    pub floored: bool,
}

pub fn propensity_eval(model: &MissingnessModel, u: &[f64], y: f64) -> Result<Propensity> {
    let eta = profile_eta(&model.gamma, model.family, &model.rows, u, &model.bandwidth)?;
    Ok(floor_propensity(
        eta.exp_eta * capped_exp(model.family.eval(&model.gamma, y)),
    ))
}

fn floor_propensity(odds_missing: f64) -> Propensity {
    let p = 1.0 / (1.0 + odds_missing);
    if p < PROPENSITY_FLOOR || !p.is_finite() {
        Propensity {
            value: PROPENSITY_FLOOR,
            floored: true,
        }
    } else {
        Propensity {
            value: p,
            floored: false,
        }
    }
}

impl MissingnessModel {
    /// `π̂` at each training row with an observed outcome (`None` elsewhere)
    /// and the number of floored values.
    pub fn training_propensities(&self) -> (Vec<Option<f64>>, usize) {
        let smoother = Smoother::new(&self.rows, &self.bandwidth);
        let res = smoother.residuals(&self.gamma, self.family, &self.rows);
        let mut floored = 0;
        let out = res
            .iter()
            .zip(&self.rows.r)
            .map(|(e, &r)| {
                r.then(|| {
                    let p = floor_propensity(*e);
                    floored += p.floored as usize;
                    p.value
                })
            })
            .collect();
        (out, floored)
    }
}
