//! Point estimates with pointwise standard errors, as reported by the harness.
//!
//! Locally constant fits use the sandwich covariance. Nonparametric fits use
//! the weighted Aalen plug-in variance for `B_hat(t)` and the inverse logistic
//! information `(sum x x' pi (1 - pi))^{-1}` for `gamma_hat`; both treat the
//! other block as known.

use nalgebra::{DMatrix, DVector};

use crate::aalen::AalenFit;
use crate::error::{Error, Result};
use crate::fit::FitReport;
use crate::inference::{project_sandwich, sandwich, SandwichCovariance};
use crate::linalg::{add_outer, inverse_with_rcond};
use crate::model::{logistic, CumulativeCurve, SubjectRecord, Theta};

#[derive(Debug, Clone)]
enum Uncertainty {
    Sandwich(Theta, Box<SandwichCovariance>),
    /// The sandwich bread was singular; standard errors are `NaN`.
    Unavailable(Theta, f64),
    PlugIn(CumulativeCurve, AalenFit),
}

#[derive(Debug, Clone)]
pub struct Estimates {
    pub gamma: DVector<f64>,
    pub gamma_se: DVector<f64>,
    uncertainty: Uncertainty,
}

fn sqrt_diag(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.nrows(), (0..m.nrows()).map(|i| m[(i, i)].max(0.0).sqrt()))
}

/// `sqrt(diag((sum x x' pi (1 - pi))^{-1}))`
pub fn logistic_se(data: &[SubjectRecord], gamma: &DVector<f64>) -> DVector<f64> {
    let p = gamma.len();
    let mut info = DMatrix::zeros(p, p);
    for r in data {
        let x = r.covariates.x();
        let pi = logistic(x.dot(gamma));
        add_outer(&mut info, x, pi * (1.0 - pi));
    }
    match inverse_with_rcond(&info) {
        Some((inv, rc)) if rc > 1e-14 => sqrt_diag(&inv),
        _ => DVector::from_element(p, f64::NAN),
    }
}

impl Estimates {
    pub fn from_fit(data: &[SubjectRecord], report: &FitReport) -> Result<Self> {
        let gamma = report.state.gamma.clone();
        if let Some(theta) = report.theta() {
            let p = theta.p();
            return Ok(match sandwich(data, &theta) {
                Ok(cov) => {
                    let q = theta.q();
                    let at0 = project_sandwich(&cov, 0.0);
                    let gamma_se = sqrt_diag(&at0.view((q, q), (p, p)).into_owned());
                    Self {
                        gamma,
                        gamma_se,
                        uncertainty: Uncertainty::Sandwich(theta, Box::new(cov)),
                    }
                }
                Err(Error::SingularJacobian { rcond }) => Self {
                    gamma,
                    gamma_se: DVector::from_element(p, f64::NAN),
                    uncertainty: Uncertainty::Unavailable(theta, rcond),
                },
                Err(e) => return Err(e),
            });
        }
        let fit = report
            .latency_fit
            .clone()
            .ok_or_else(|| Error::Config("nonparametric report without a latency fit".into()))?;
        Ok(Self {
            gamma_se: logistic_se(data, &gamma),
            gamma,
            uncertainty: Uncertainty::PlugIn(report.state.curve(), fit),
        })
    }

    /// Reciprocal condition of the bread when the sandwich was unavailable.
    pub fn singular_jacobian(&self) -> Option<f64> {
        match self.uncertainty {
            Uncertainty::Unavailable(_, rc) => Some(rc),
            _ => None,
        }
    }

    pub fn q(&self) -> usize {
        match &self.uncertainty {
            Uncertainty::Sandwich(th, _) | Uncertainty::Unavailable(th, _) => th.q(),
            Uncertainty::PlugIn(c, _) => c.dim(),
        }
    }

    pub fn cumulative(&self, t: f64) -> DVector<f64> {
        match &self.uncertainty {
            Uncertainty::Sandwich(th, _) | Uncertainty::Unavailable(th, _) => th.beta.cumulative_at(t),
            Uncertainty::PlugIn(c, _) => c.evaluate(t),
        }
    }

    pub fn cumulative_se(&self, t: f64) -> DVector<f64> {
        let q = self.q();
        match &self.uncertainty {
            Uncertainty::Sandwich(_, cov) => {
                sqrt_diag(&project_sandwich(cov, t).view((0, 0), (q, q)).into_owned())
            }
            Uncertainty::Unavailable(..) => DVector::from_element(q, f64::NAN),
            Uncertainty::PlugIn(_, fit) => sqrt_diag(&fit.variance_at(t)),
        }
    }

    /// Window cuts in locally constant mode, `0` and the event-time knots otherwise.
    pub fn knots(&self) -> Vec<f64> {
        match &self.uncertainty {
            Uncertainty::Sandwich(th, _) | Uncertainty::Unavailable(th, _) => th.partition().cuts(),
            Uncertainty::PlugIn(c, _) => std::iter::once(0.0).chain(c.knots().iter().copied()).collect(),
        }
    }
}
