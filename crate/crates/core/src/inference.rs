//! Sandwich covariance of the locally constant estimator and a known-truth
//! covariance oracle for simulation scenarios.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fit::psi_contributions;
use crate::linalg::{add_outer, add_outer2, inverse_with_rcond};
use crate::model::{ht_matrix, logistic, CovariatePair, SubjectRecord, Theta};
use crate::quad;
use crate::simulate::{splitmix64, subject_rng, ScenarioConfig};

/// Reciprocal condition below which the bread matrix is treated as singular.
pub const JACOBIAN_CONDITION: f64 = 1e-12;

/// `d Psi_n^K / d theta` in closed form.
pub fn psi_jacobian(data: &[SubjectRecord], theta: &Theta) -> DMatrix<f64> {
    let part = theta.partition();
    let (q, k, p) = (theta.q(), part.count(), theta.p());
    let dim = q * k + p;
    let n = data.len().max(1) as f64;
    let mut jac = DMatrix::zeros(dim, dim);
    let mut occ = vec![0.0; k];
    let mut slope = vec![0.0; k];
    for r in data {
        let (x, z) = (r.covariates.x(), r.covariates.z());
        let censored = 1.0 - r.delta();
        let w = theta.weight(r.time, &r.covariates);
        let u = r.delta() + censored * w;
        let dw = censored * w * (1.0 - w);
        let pi = logistic(x.dot(&theta.gamma));
        for j in 0..k {
            occ[j] = part.occupancy(r.time, j);
            slope[j] = z.dot(theta.beta.window(j));
        }
        let zz = z * z.transpose();
        let zx = z * x.transpose();
        for j in 0..k {
            if occ[j] == 0.0 {
                continue;
            }
            let mut diag = jac.view_mut((j * q, j * q), (q, q));
            diag -= &zz * (occ[j] * u / n);
            if dw == 0.0 {
                continue;
            }
            for l in 0..k {
                if occ[l] == 0.0 {
                    continue;
                }
                let mut block = jac.view_mut((j * q, l * q), (q, q));
                block += &zz * (dw * occ[j] * occ[l] * slope[j] / n);
            }
            let mut block = jac.view_mut((j * q, q * k), (q, p));
            block -= &zx * (occ[j] * slope[j] * dw / n);
        }
        let xz = zx.transpose();
        for l in 0..k {
            if occ[l] == 0.0 || dw == 0.0 {
                continue;
            }
            let mut block = jac.view_mut((q * k, l * q), (p, q));
            block -= &xz * (dw * occ[l] / n);
        }
        let mut block = jac.view_mut((q * k, q * k), (p, p));
        block += x * x.transpose() * ((dw - pi * (1.0 - pi)) / n);
    }
    jac
}

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichCovariance {
    /// Estimated covariance of `theta_hat`.
    pub full: DMatrix<f64>,
    /// `-d Psi_n / d theta` at `theta_hat`.
    pub bread: DMatrix<f64>,
    /// `n^{-1} sum psi_i psi_i'`.
    pub meat: DMatrix<f64>,
    pub n: usize,
    pub theta: Theta,
}

/// `Cov(theta_hat) = bread^{-1} meat bread^{-T} / n`.
pub fn sandwich(data: &[SubjectRecord], theta_hat: &Theta) -> Result<SandwichCovariance> {
    let dim = theta_hat.dim();
    let n = data.len();
    if n == 0 {
        return Err(Error::Config("sandwich needs data".into()));
    }
    let bread = -psi_jacobian(data, theta_hat);
    let (inv, rc) = inverse_with_rcond(&bread).ok_or(Error::SingularJacobian { rcond: 0.0 })?;
    if rc < JACOBIAN_CONDITION {
        return Err(Error::SingularJacobian { rcond: rc });
    }
    let mut meat = DMatrix::zeros(dim, dim);
    for psi in psi_contributions(data, theta_hat) {
        add_outer(&mut meat, &psi, 1.0 / n as f64);
    }
    let mut full = &inv * &meat * inv.transpose() / n as f64;
    full = (&full + full.transpose()) * 0.5;
    Ok(SandwichCovariance {
        full,
        bread,
        meat,
        n,
        theta: theta_hat.clone(),
    })
}

/// `H_t Cov H_t'`: covariance of `(B_hat(t), gamma_hat)`.
pub fn project_sandwich(cov: &SandwichCovariance, t: f64) -> DMatrix<f64> {
    let h = ht_matrix(cov.theta.partition(), cov.theta.q(), cov.theta.p(), t);
    &h * &cov.full * h.transpose()
}

/// Blocks of the limiting covariance of `sqrt(n) (B_hat(t) - B(t), gamma_hat - gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSigma {
    pub s00: DMatrix<f64>,
    pub s01: DMatrix<f64>,
    pub s11: DMatrix<f64>,
}

impl OracleSigma {
    pub fn full(&self) -> DMatrix<f64> {
        let (q, p) = (self.s00.nrows(), self.s11.nrows());
        let mut m = DMatrix::zeros(q + p, q + p);
        m.view_mut((0, 0), (q, q)).copy_from(&self.s00);
        m.view_mut((0, q), (q, p)).copy_from(&self.s01);
        m.view_mut((q, 0), (p, q)).copy_from(&self.s01.transpose());
        m.view_mut((q, q), (p, p)).copy_from(&self.s11);
        m
    }
}

/// Covariate-level quantities at one time point, with the censoring factor
/// `1 - H_c(s-)` removed: `y = (1 - H_c) S`, and every weight is linear in `y`.
struct Slice {
    /// `E ZZ' S w`
    g: DMatrix<f64>,
    /// `E XZ' S w (1 - w) z'beta`
    xz_nu: DMatrix<f64>,
    /// `E ZX' S w (1 - w)`
    zx_mu: DMatrix<f64>,
    /// `E XX' S w (1 - w)^2 z'beta`
    xx_xi: DMatrix<f64>,
    /// `E ZZ' S w z'beta`
    zz_lambda_h: DMatrix<f64>,
    /// `E Z A' S w z'beta`
    za_lambda_h: DMatrix<f64>,
    /// `E AA' S w z'beta`
    aa_lambda_h: DMatrix<f64>,
}

struct Draw {
    cov: CovariatePair,
    pi: f64,
}

fn slice_at(config: &ScenarioConfig, draws: &[Draw], s: f64) -> Result<Slice> {
    let (p, q) = (config.p(), config.q());
    let b = config.true_cumulative(s);
    let beta: DVector<f64> = DVector::from_iterator(q, config.beta.iter().map(|f| f.value(s)));
    let m = draws.len() as f64;
    let mut g = DMatrix::zeros(q, q);
    let mut xz_nu = DMatrix::zeros(p, q);
    let mut zx_mu = DMatrix::zeros(q, p);
    let mut xx_xi = DMatrix::zeros(p, p);
    let mut zz_lambda_h = DMatrix::zeros(q, q);
    // per-draw values reused by the second pass
    let mut cache = Vec::with_capacity(draws.len());
    for d in draws {
        let (x, z) = (d.cov.x(), d.cov.z());
        let e = (-z.dot(&b)).exp();
        let surv = 1.0 - d.pi + d.pi * e;
        let w = d.pi * e / surv;
        let h = z.dot(&beta);
        let lambda = surv * w;
        let mu = lambda * (1.0 - w);
        add_outer(&mut g, z, lambda / m);
        add_outer2(&mut xz_nu, x, z, mu * h / m);
        add_outer2(&mut zx_mu, z, x, mu / m);
        add_outer(&mut xx_xi, x, mu * (1.0 - w) * h / m);
        add_outer(&mut zz_lambda_h, z, lambda * h / m);
        cache.push((w, lambda * h));
    }
    let (g_inv, rc) = inverse_with_rcond(&g).ok_or(Error::SingularDesign { time: s })?;
    if rc < 1e-12 {
        return Err(Error::SingularDesign { time: s });
    }
    let c = &xz_nu * &g_inv;
    let mut za_lambda_h = DMatrix::zeros(q, p);
    let mut aa_lambda_h = DMatrix::zeros(p, p);
    for (d, &(w, lh)) in draws.iter().zip(&cache) {
        let (x, z) = (d.cov.x(), d.cov.z());
        let a = &c * z - x * (1.0 - w);
        add_outer2(&mut za_lambda_h, z, &a, lh / m);
        add_outer(&mut aa_lambda_h, &a, lh / m);
    }
    Ok(Slice {
        g,
        xz_nu,
        zx_mu,
        xx_xi,
        zz_lambda_h,
        za_lambda_h,
        aa_lambda_h,
    })
}

fn integrate_matrices(grid: &[f64], values: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (r, c) = values[0].shape();
    DMatrix::from_fn(r, c, |i, j| {
        let col: Vec<f64> = values.iter().map(|m| m[(i, j)]).collect();
        quad::trapezoid(grid, &col)
    })
}

fn slices(
    config: &ScenarioConfig,
    draws: &[Draw],
    upper: f64,
    points: usize,
) -> Result<(Vec<f64>, Vec<Slice>)> {
    let grid: Vec<f64> = (0..points)
        .map(|k| upper * k as f64 / (points - 1) as f64)
        .collect();
    let out: Result<Vec<Slice>> = grid
        .par_iter()
        .map(|&s| slice_at(config, draws, s))
        .collect();
    Ok((grid, out?))
}

/// The limiting covariance blocks at time `t`, by Monte Carlo over
/// `mc_draws` covariate draws and the trapezoid rule on `grid` time points.
/// When the incidence information matrix is singular, the blocks involving
/// `gamma` are NaN.
pub fn oracle_sigma(
    config: &ScenarioConfig,
    t: f64,
    mc_draws: usize,
    grid: usize,
    seed: u64,
) -> Result<OracleSigma> {
    config.validate()?;
    if mc_draws == 0 || grid < 2 || !(t > 0.0 && t <= config.horizon) {
        return Err(Error::Config("oracle needs draws, a grid and 0 < t <= horizon".into()));
    }
    let gamma = DVector::from_column_slice(&config.gamma);
    let stream = splitmix64(seed ^ 0x7369_676d_615f_6f72);
    let draws: Vec<Draw> = (0..mc_draws)
        .map(|i| {
            let mut rng = subject_rng(stream, i as u64);
            let (x, z) = config.draw_covariates(&mut rng);
            let cov = CovariatePair::from_columns(&x, &z)?;
            let pi = logistic(cov.x().dot(&gamma));
            Ok(Draw { cov, pi })
        })
        .collect::<Result<_>>()?;
    let tau = config.horizon;
    let censor = |s: f64| 1.0 - config.censoring.cdf_left(s, tau);

    // (Psi-dot^{11})^{-1} and the A-A' integral over [0, tau]
    let (full_grid, full) = slices(config, &draws, tau, grid)?;
    let mut info_terms = Vec::with_capacity(grid);
    let mut aa_terms = Vec::with_capacity(grid);
    for (&s, sl) in full_grid.iter().zip(&full) {
        let c = censor(s);
        let g_inv = sl.g.clone().try_inverse().ok_or(Error::SingularDesign { time: s })?;
        info_terms.push((&sl.xx_xi - &sl.xz_nu * &g_inv * &sl.zx_mu) * c);
        aa_terms.push(&sl.aa_lambda_h * c);
    }
    let info = integrate_matrices(&full_grid, &info_terms);
    // without incidence information (e.g. pi = 1) only the latency block is defined
    let p = config.p();
    let psi11 = match inverse_with_rcond(&info) {
        Some((inv, rc)) if rc >= JACOBIAN_CONDITION => inv,
        _ => DMatrix::from_element(p, p, f64::NAN),
    };
    let s11 = &psi11 * integrate_matrices(&full_grid, &aa_terms) * psi11.transpose();

    // blocks up to t: the 1 - H_c factor cancels in the G^{-1} ... products once
    let (t_grid, upto) = slices(config, &draws, t, grid)?;
    let mut s00_terms = Vec::with_capacity(grid);
    let mut s01_terms = Vec::with_capacity(grid);
    for (&s, sl) in t_grid.iter().zip(&upto) {
        let c = censor(s);
        let g_inv = sl.g.clone().try_inverse().ok_or(Error::SingularDesign { time: s })?;
        s00_terms.push(&g_inv * &sl.zz_lambda_h * &g_inv / c);
        s01_terms.push(&g_inv * &sl.za_lambda_h);
    }
    let s00 = integrate_matrices(&t_grid, &s00_terms);
    let s01 = integrate_matrices(&t_grid, &s01_terms) * psi11.transpose();
    Ok(OracleSigma {
        s00: (&s00 + s00.transpose()) * 0.5,
        s01,
        s11: (&s11 + s11.transpose()) * 0.5,
    })
}
