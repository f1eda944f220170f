//! The classical Aalen least-squares estimator and its weighted variant used
//! by the nonparametric cure estimator.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{add_outer, inverse_with_rcond};
use crate::model::{dimensions, CumulativeCurve, Interpolation, SubjectRecord};

/// Default reciprocal-condition threshold below which estimation is truncated.
pub const DEFAULT_CONDITION: f64 = 1e-10;

/// Estimated cumulative coefficients with their plug-in variance.
#[derive(Debug, Clone, PartialEq)]
pub struct AalenFit {
    /// Right-continuous step curve with one knot per used event time.
    pub curve: CumulativeCurve,
    /// First event time at which the at-risk design was ill-conditioned.
    pub truncation: Option<f64>,
    /// `V(t)` at each knot of `curve`.
    pub variance: Vec<DMatrix<f64>>,
}

impl AalenFit {
    /// `V(t)`, the variance at the last knot not after `t`.
    pub fn variance_at(&self, t: f64) -> DMatrix<f64> {
        let idx = self.curve.knots().partition_point(|&k| k <= t);
        if idx == 0 {
            let q = self.curve.dim();
            DMatrix::zeros(q, q)
        } else {
            self.variance[idx - 1].clone()
        }
    }
}

/// Total order on records, so that sorted sums do not depend on input order.
pub(crate) fn record_order(a: &SubjectRecord, b: &SubjectRecord) -> Ordering {
    a.time
        .total_cmp(&b.time)
        .then(a.event.cmp(&b.event))
        .then_with(|| {
            let lhs = a.covariates.x().iter().chain(a.covariates.z().iter());
            let rhs = b.covariates.x().iter().chain(b.covariates.z().iter());
            lhs.zip(rhs)
                .map(|(u, v)| u.total_cmp(v))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Sorted permutation of `data`.
pub(crate) fn sorted_order(data: &[SubjectRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&i, &j| record_order(&data[i], &data[j]));
    order
}

/// Aalen increments `dB(s) = G(s)^{-1} n^{-1} sum_{T_i = s, delta_i = 1} Z_i`
/// with `G(s) = n^{-1} sum_i Y_i(s) u_i Z_i Z_i'`.
pub(crate) fn weighted_aalen(
    data: &[SubjectRecord],
    weights: &[f64],
    condition: f64,
) -> Result<AalenFit> {
    let (_, q) = dimensions(data)?;
    assert_eq!(weights.len(), data.len(), "one weight per subject");
    let n = data.len() as f64;
    let order = sorted_order(data);

    // distinct event times, ascending, with their summed Z and Z Z'
    let mut times: Vec<f64> = Vec::new();
    let mut z_sums: Vec<DVector<f64>> = Vec::new();
    let mut zz_sums: Vec<DMatrix<f64>> = Vec::new();
    for &i in &order {
        let r = &data[i];
        if !r.event {
            continue;
        }
        if times.last() != Some(&r.time) {
            times.push(r.time);
            z_sums.push(DVector::zeros(q));
            zz_sums.push(DMatrix::zeros(q, q));
        }
        let k = times.len() - 1;
        z_sums[k] += r.covariates.z();
        add_outer(&mut zz_sums[k], r.covariates.z(), 1.0);
    }
    if times.is_empty() {
        return Ok(AalenFit {
            curve: CumulativeCurve::zero(q),
            truncation: None,
            variance: Vec::new(),
        });
    }

    // risk-set design matrices by a descending sweep
    let mut designs = vec![DMatrix::zeros(q, q); times.len()];
    let mut acc = DMatrix::zeros(q, q);
    let mut next = order.len();
    for k in (0..times.len()).rev() {
        while next > 0 && data[order[next - 1]].time >= times[k] {
            next -= 1;
            let i = order[next];
            add_outer(&mut acc, data[i].covariates.z(), weights[i]);
        }
        designs[k] = &acc / n;
    }

    let mut knots = Vec::with_capacity(times.len());
    let mut values = Vec::with_capacity(times.len());
    let mut variance = Vec::with_capacity(times.len());
    let mut cum = DVector::zeros(q);
    let mut var = DMatrix::zeros(q, q);
    let mut truncation = None;
    for (k, &s) in times.iter().enumerate() {
        let inv = match inverse_with_rcond(&designs[k]) {
            Some((inv, rc)) if rc >= condition => inv,
            _ if k == 0 => return Err(Error::SingularDesign { time: s }),
            _ => {
                truncation = Some(s);
                break;
            }
        };
        cum += &inv * (&z_sums[k] / n);
        var += &inv * (&zz_sums[k] / (n * n)) * &inv;
        knots.push(s);
        values.push(cum.clone());
        variance.push(var.clone());
    }
    Ok(AalenFit {
        curve: CumulativeCurve::new(q, knots, values, Interpolation::StepRightContinuous)?,
        truncation,
        variance,
    })
}

/// The Aalen estimator `B~(t)` without a cure fraction.
pub fn fit_aalen(data: &[SubjectRecord]) -> Result<AalenFit> {
    fit_aalen_with(data, DEFAULT_CONDITION)
}

pub fn fit_aalen_with(data: &[SubjectRecord], condition: f64) -> Result<AalenFit> {
    weighted_aalen(data, &vec![1.0; data.len()], condition)
}

/// Plug-in variance `V(t)` at each knot of the Aalen curve, as `(knots, matrices)`.
pub fn aalen_variance(data: &[SubjectRecord]) -> Result<(Vec<f64>, Vec<DMatrix<f64>>)> {
    let fit = fit_aalen(data)?;
    Ok((fit.curve.knots().to_vec(), fit.variance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CovariatePair;

    fn rec(t: f64, d: bool, z: &[f64]) -> SubjectRecord {
        SubjectRecord::new(t, d, CovariatePair::from_columns(&[], z).unwrap()).unwrap()
    }

    #[test]
    fn nelson_aalen_toy() {
        let data = vec![rec(1.0, true, &[]), rec(2.0, true, &[])];
        let fit = fit_aalen(&data).unwrap();
        assert_eq!(fit.curve.evaluate(1.0)[0], 0.5);
        assert_eq!(fit.curve.evaluate(2.0)[0], 1.5);
        assert_eq!(fit.curve.evaluate(0.5)[0], 0.0);
        // 1/2^2 + 1/1^2
        assert!((fit.variance_at(2.0)[(0, 0)] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn no_events_gives_zero_curve() {
        let data = vec![rec(1.0, false, &[0.2]), rec(2.0, false, &[0.1])];
        let fit = fit_aalen(&data).unwrap();
        assert!(fit.curve.knots().is_empty());
        assert_eq!(fit.curve.evaluate(1.5), DVector::zeros(2));
        assert_eq!(fit.variance_at(1.5), DMatrix::zeros(2, 2));
    }

    #[test]
    fn singular_first_event() {
        // every subject shares z1, so G is rank one
        let data = vec![rec(1.0, true, &[0.5]), rec(2.0, true, &[0.5])];
        assert!(matches!(
            fit_aalen(&data),
            Err(Error::SingularDesign { time }) if time == 1.0
        ));
    }

    #[test]
    fn truncates_when_risk_set_thins() {
        let data = vec![
            rec(1.0, true, &[0.1]),
            rec(2.0, true, &[0.7]),
            rec(3.0, true, &[0.3]),
        ];
        let fit = fit_aalen(&data).unwrap();
        assert_eq!(fit.truncation, Some(3.0));
        assert_eq!(fit.curve.knots(), &[1.0, 2.0]);
    }

    #[test]
    fn tied_events_contribute_jointly() {
        let data = vec![rec(1.0, true, &[]), rec(1.0, true, &[]), rec(2.0, false, &[])];
        let fit = fit_aalen(&data).unwrap();
        assert_eq!(fit.curve.knots(), &[1.0]);
        assert!((fit.curve.evaluate(1.0)[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn permutation_invariance_is_bitwise() {
        let mut data: Vec<SubjectRecord> = (0..40)
            .map(|i| {
                let t = 0.05 + (i * 37 % 41) as f64 / 20.0;
                rec(t, i % 3 != 0, &[((i * 13) % 7) as f64 / 7.0])
            })
            .collect();
        let a = fit_aalen(&data).unwrap();
        data.reverse();
        data.swap(3, 17);
        let b = fit_aalen(&data).unwrap();
        assert_eq!(a, b);
    }
}
