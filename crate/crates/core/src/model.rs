//! Domain types and pure functions of the mixture cure model with a linear
//! latency hazard: `S(t | x, z) = 1 - pi(x'gamma) + pi(x'gamma) exp(-z'B(t))`.
//!
//! Window indices are zero-based throughout: window `j` is `[v_j, v_{j+1})`
//! with `v_j = j * horizon / K`. The last window is closed at the horizon.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;

/// `exp(v) / (1 + exp(v))`, never exponentiating a large positive number.
#[inline]
pub fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(v))`; its derivative is [`logistic`].
#[inline]
pub fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Incidence covariates `x` and latency covariates `z`, both with a leading intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariatePair {
    x: DVector<f64>,
    z: DVector<f64>,
}

impl CovariatePair {
    pub fn new(x: DVector<f64>, z: DVector<f64>) -> Result<Self> {
        if x.is_empty() || z.is_empty() || x[0] != 1.0 || z[0] != 1.0 {
            return Err(Error::Config(
                "covariate vectors must start with an intercept entry equal to 1".into(),
            ));
        }
        if x.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("covariates must be finite".into()));
        }
        Ok(Self { x, z })
    }

    /// Builds the pair from the non-intercept columns; the intercepts are prepended.
    pub fn from_columns(x_rest: &[f64], z_rest: &[f64]) -> Result<Self> {
        let x = DVector::from_iterator(
            x_rest.len() + 1,
            std::iter::once(1.0).chain(x_rest.iter().copied()),
        );
        let z = DVector::from_iterator(
            z_rest.len() + 1,
            std::iter::once(1.0).chain(z_rest.iter().copied()),
        );
        Self::new(x, z)
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn p(&self) -> usize {
        self.x.len()
    }

    pub fn q(&self) -> usize {
        self.z.len()
    }
}

/// One observation `(T, delta, X, Z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub time: f64,
    pub event: bool,
    pub covariates: CovariatePair,
}

impl SubjectRecord {
    pub fn new(time: f64, event: bool, covariates: CovariatePair) -> Result<Self> {
        if !(time.is_finite() && time > 0.0) {
            return Err(Error::Config(format!("observed time must be positive, got {time}")));
        }
        Ok(Self {
            time,
            event,
            covariates,
        })
    }

    pub fn delta(&self) -> f64 {
        if self.event {
            1.0
        } else {
            0.0
        }
    }

    /// `N(t) = 1{T <= t, delta = 1}`
    pub fn counting(&self, t: f64) -> f64 {
        if self.event && self.time <= t {
            1.0
        } else {
            0.0
        }
    }

    /// `Y(t) = 1{T >= t}`
    pub fn at_risk(&self, t: f64) -> f64 {
        if self.time >= t {
            1.0
        } else {
            0.0
        }
    }
}

/// Checks that all records share the same covariate dimensions and returns `(p, q)`.
pub fn dimensions(data: &[SubjectRecord]) -> Result<(usize, usize)> {
    let first = data
        .first()
        .ok_or_else(|| Error::Config("dataset is empty".into()))?;
    let (p, q) = (first.covariates.p(), first.covariates.q());
    if data
        .iter()
        .any(|r| r.covariates.p() != p || r.covariates.q() != q)
    {
        return Err(Error::Config("inconsistent covariate dimensions".into()));
    }
    Ok((p, q))
}

/// Equal-width partition `0 = v_0 < ... < v_K = horizon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Partition {
    horizon: f64,
    count: usize,
}

impl Partition {
    pub fn new(horizon: f64, count: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) || count == 0 {
            return Err(Error::Config(format!(
                "partition needs horizon > 0 and K >= 1 (got {horizon}, {count})"
            )));
        }
        Ok(Self { horizon, count })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn width(&self) -> f64 {
        self.horizon / self.count as f64
    }

    /// Cut point `v_j` for `j = 0..=K`.
    pub fn cut(&self, j: usize) -> f64 {
        if j == self.count {
            self.horizon
        } else {
            j as f64 * self.horizon / self.count as f64
        }
    }

    pub fn cuts(&self) -> Vec<f64> {
        (0..=self.count).map(|j| self.cut(j)).collect()
    }

    /// Index of the window containing `t`; times at or beyond the horizon map to the last window.
    pub fn window_of(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        let guess = ((t / self.horizon) * self.count as f64).floor() as usize;
        let mut j = guess.min(self.count - 1);
        while j > 0 && t < self.cut(j) {
            j -= 1;
        }
        while j + 1 < self.count && t >= self.cut(j + 1) {
            j += 1;
        }
        j
    }

    /// `I_{W_j}(t)`
    pub fn indicator(&self, t: f64, j: usize) -> f64 {
        if t >= 0.0 && t <= self.horizon && self.window_of(t) == j {
            1.0
        } else {
            0.0
        }
    }

    /// `r_j(t)`: time spent in window `j` up to `t`.
    pub fn occupancy(&self, t: f64, j: usize) -> f64 {
        let (a, b) = (self.cut(j), self.cut(j + 1));
        if t <= a {
            0.0
        } else if t >= b {
            b - a
        } else {
            t - a
        }
    }
}

/// [`Partition::occupancy`] as a free function.
pub fn window_occupancy(t: f64, partition: &Partition, j: usize) -> f64 {
    partition.occupancy(t, j)
}

/// One coefficient function `beta_l(t)` of a data-generating scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientFn {
    Constant {
        value: f64,
    },
    /// `c_0 + c_1 t + c_2 t^2 + ...`
    Polynomial {
        coefficients: Vec<f64>,
    },
    /// `P(t) / Q(t)` with ascending-power coefficients.
    Rational {
        numerator: Vec<f64>,
        denominator: Vec<f64>,
    },
    /// Locally constant on `values.len()` equal windows of `[0, horizon]`.
    Step {
        horizon: f64,
        values: Vec<f64>,
    },
}

fn horner(c: &[f64], t: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &v| acc * t + v)
}

/// Whether the polynomial vanishes or changes sign on a 4096-cell grid of `[0, t]`.
fn changes_sign(c: &[f64], t: f64) -> bool {
    const CELLS: usize = 4096;
    let first = horner(c, 0.0);
    (0..=CELLS).any(|k| {
        let v = horner(c, t * k as f64 / CELLS as f64);
        v == 0.0 || v.signum() != first.signum()
    })
}

impl CoefficientFn {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::Polynomial { coefficients } => horner(coefficients, t),
            Self::Rational {
                numerator,
                denominator,
            } => horner(numerator, t) / horner(denominator, t),
            Self::Step { horizon, values } => {
                let part = Partition {
                    horizon: *horizon,
                    count: values.len().max(1),
                };
                values.get(part.window_of(t)).copied().unwrap_or(0.0)
            }
        }
    }

    /// `int_0^t beta(s) ds` in closed form, when one is available.
    pub fn closed_form_integral(&self, t: f64) -> Option<f64> {
        match self {
            Self::Constant { value } => Some(value * t),
            Self::Polynomial { coefficients } => Some(
                coefficients
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c * t.powi(k as i32 + 1) / (k + 1) as f64)
                    .sum(),
            ),
            Self::Step { horizon, values } => {
                let part = Partition {
                    horizon: *horizon,
                    count: values.len().max(1),
                };
                Some(
                    values
                        .iter()
                        .enumerate()
                        .map(|(j, v)| v * part.occupancy(t, j))
                        .sum::<f64>()
                        + values.last().copied().unwrap_or(0.0) * (t - horizon).max(0.0),
                )
            }
            Self::Rational { .. } => None,
        }
    }

    /// `int_0^t beta(s) ds`, falling back to adaptive Simpson. `NaN` when a
    /// rational coefficient has a pole in `[0, t]`.
    pub fn integral(&self, t: f64) -> f64 {
        if let Self::Rational { denominator, .. } = self {
            if changes_sign(denominator, t) {
                return f64::NAN;
            }
        }
        self.closed_form_integral(t)
            .unwrap_or_else(|| quad::adaptive_simpson(&|s| self.value(s), 0.0, t, 1e-10))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Constant { value } => value.is_finite(),
            Self::Polynomial { coefficients } => {
                !coefficients.is_empty() && coefficients.iter().all(|c| c.is_finite())
            }
            Self::Rational {
                numerator,
                denominator,
            } => {
                !numerator.is_empty()
                    && !denominator.is_empty()
                    && numerator.iter().chain(denominator).all(|c| c.is_finite())
            }
            Self::Step { horizon, values } => {
                *horizon > 0.0 && !values.is_empty() && values.iter().all(|v| v.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid coefficient function {self:?}")))
        }
    }
}

/// Anything that yields a regression-coefficient vector `beta(t)`.
pub trait RegressionFunction {
    fn dim(&self) -> usize;
    fn beta_at(&self, t: f64) -> DVector<f64>;
}

impl RegressionFunction for [CoefficientFn] {
    fn dim(&self) -> usize {
        self.len()
    }

    fn beta_at(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.iter().map(|f| f.value(t)))
    }
}

impl RegressionFunction for Vec<CoefficientFn> {
    fn dim(&self) -> usize {
        self.len()
    }

    fn beta_at(&self, t: f64) -> DVector<f64> {
        self.as_slice().beta_at(t)
    }
}

/// `z'beta(t)`. With `guarded`, a nonpositive value is reported as a violation.
pub fn hazard_value<R: RegressionFunction + ?Sized>(
    t: f64,
    z: &DVector<f64>,
    beta: &R,
    guarded: bool,
) -> Result<f64> {
    let h = z.dot(&beta.beta_at(t));
    if guarded && !(h > 0.0 && h.is_finite()) {
        return Err(Error::PositivityViolation { time: t, value: h });
    }
    Ok(h)
}

/// Locally constant coefficients `beta(t) = sum_j beta_j I_{W_j}(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCoefficients {
    partition: Partition,
    values: Vec<DVector<f64>>,
}

impl StepCoefficients {
    pub fn new(partition: Partition, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != partition.count() {
            return Err(Error::Config(format!(
                "expected {} window coefficient vectors, got {}",
                partition.count(),
                values.len()
            )));
        }
        let q = values[0].len();
        if q == 0 || values.iter().any(|v| v.len() != q) {
            return Err(Error::Config("window coefficient vectors differ in length".into()));
        }
        Ok(Self { partition, values })
    }

    pub fn constant(partition: Partition, beta: DVector<f64>) -> Self {
        Self {
            partition,
            values: vec![beta; partition.count()],
        }
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn q(&self) -> usize {
        self.values[0].len()
    }

    pub fn window(&self, j: usize) -> &DVector<f64> {
        &self.values[j]
    }

    /// `B(t) = sum_j r_j(t) beta_j`
    pub fn cumulative_at(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.q());
        for (j, b) in self.values.iter().enumerate() {
            let r = self.partition.occupancy(t, j);
            if r > 0.0 {
                out.axpy(r, b, 1.0);
            }
        }
        out
    }

    /// Piecewise-linear cumulative curve with knots at the cut points.
    pub fn to_curve(&self) -> CumulativeCurve {
        let cuts = self.partition.cuts();
        let values = cuts.iter().map(|&t| self.cumulative_at(t)).collect();
        CumulativeCurve {
            knots: cuts,
            values,
            interpolation: Interpolation::PiecewiseLinear,
            dim: self.q(),
        }
    }

    /// Window-major stacking `(beta_{0,1}, .., beta_{q-1,1}, .., beta_{q-1,K})`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn from_flat(partition: Partition, q: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != q * partition.count() {
            return Err(Error::Config("flat coefficient length mismatch".into()));
        }
        let values = flat
            .chunks(q)
            .map(DVector::from_column_slice)
            .collect();
        Self::new(partition, values)
    }
}

impl RegressionFunction for StepCoefficients {
    fn dim(&self) -> usize {
        self.q()
    }

    fn beta_at(&self, t: f64) -> DVector<f64> {
        self.values[self.partition.window_of(t)].clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    StepRightContinuous,
    PiecewiseLinear,
}

/// Representation of `B(t) = int_0^t beta(s) ds` on a set of knots.
/// Beyond the last knot the curve is held constant.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeCurve {
    knots: Vec<f64>,
    values: Vec<DVector<f64>>,
    interpolation: Interpolation,
    dim: usize,
}

impl CumulativeCurve {
    pub fn new(
        dim: usize,
        knots: Vec<f64>,
        values: Vec<DVector<f64>>,
        interpolation: Interpolation,
    ) -> Result<Self> {
        if knots.len() != values.len() {
            return Err(Error::Config("curve knots and values differ in length".into()));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) || knots.iter().any(|k| *k < 0.0) {
            return Err(Error::Config("curve knots must be strictly increasing and nonnegative".into()));
        }
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::Config("curve value dimension mismatch".into()));
        }
        Ok(Self {
            knots,
            values,
            interpolation,
            dim,
        })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            knots: Vec::new(),
            values: Vec::new(),
            interpolation: Interpolation::StepRightContinuous,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn evaluate(&self, t: f64) -> DVector<f64> {
        let idx = self.knots.partition_point(|&k| k <= t);
        match self.interpolation {
            Interpolation::StepRightContinuous => {
                if idx == 0 {
                    DVector::zeros(self.dim)
                } else {
                    self.values[idx - 1].clone()
                }
            }
            Interpolation::PiecewiseLinear => {
                if idx == self.knots.len() {
                    return self
                        .values
                        .last()
                        .cloned()
                        .unwrap_or_else(|| DVector::zeros(self.dim));
                }
                let (t0, v0) = if idx == 0 {
                    (0.0, DVector::zeros(self.dim))
                } else {
                    (self.knots[idx - 1], self.values[idx - 1].clone())
                };
                let (t1, v1) = (self.knots[idx], &self.values[idx]);
                if t <= t0 || t1 <= t0 {
                    return v0;
                }
                let a = (t - t0) / (t1 - t0);
                &v0 * (1.0 - a) + v1 * a
            }
        }
    }
}

/// Latency part of a parameter: nonparametric curve or locally constant steps.
#[derive(Debug, Clone, PartialEq)]
pub enum Latency {
    Curve(CumulativeCurve),
    Steps(StepCoefficients),
}

/// `phi = (B, gamma)` or `theta = (beta_1, .., beta_K, gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    pub latency: Latency,
    pub gamma: DVector<f64>,
}

impl ParameterState {
    pub fn cumulative_at(&self, t: f64) -> DVector<f64> {
        match &self.latency {
            Latency::Curve(c) => c.evaluate(t),
            Latency::Steps(s) => s.cumulative_at(t),
        }
    }

    pub fn q(&self) -> usize {
        match &self.latency {
            Latency::Curve(c) => c.dim(),
            Latency::Steps(s) => s.q(),
        }
    }

    pub fn p(&self) -> usize {
        self.gamma.len()
    }

    /// The implied cumulative curve (piecewise linear for the step form).
    pub fn curve(&self) -> CumulativeCurve {
        match &self.latency {
            Latency::Curve(c) => c.clone(),
            Latency::Steps(s) => s.to_curve(),
        }
    }

    pub fn as_theta(&self) -> Option<Theta> {
        match &self.latency {
            Latency::Steps(s) => Some(Theta {
                beta: s.clone(),
                gamma: self.gamma.clone(),
            }),
            Latency::Curve(_) => None,
        }
    }
}

/// Parameter of the locally constant model.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub beta: StepCoefficients,
    pub gamma: DVector<f64>,
}

impl Theta {
    pub fn partition(&self) -> &Partition {
        self.beta.partition()
    }

    pub fn q(&self) -> usize {
        self.beta.q()
    }

    pub fn p(&self) -> usize {
        self.gamma.len()
    }

    /// Length `qK + p`.
    pub fn dim(&self) -> usize {
        self.q() * self.partition().count() + self.p()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut flat = self.beta.to_flat();
        flat.extend(self.gamma.iter().copied());
        DVector::from_vec(flat)
    }

    pub fn from_vector(partition: Partition, q: usize, p: usize, v: &DVector<f64>) -> Result<Self> {
        let qk = q * partition.count();
        if v.len() != qk + p {
            return Err(Error::Config("parameter vector length mismatch".into()));
        }
        Ok(Self {
            beta: StepCoefficients::from_flat(partition, q, &v.as_slice()[..qk])?,
            gamma: DVector::from_column_slice(&v.as_slice()[qk..]),
        })
    }

    /// `w(t) = pi(x'gamma - z'B(t))` for one subject.
    pub fn weight(&self, t: f64, cov: &CovariatePair) -> f64 {
        logistic(cov.x().dot(&self.gamma) - cov.z().dot(&self.beta.cumulative_at(t)))
    }
}

impl From<Theta> for ParameterState {
    fn from(theta: Theta) -> Self {
        Self {
            latency: Latency::Steps(theta.beta),
            gamma: theta.gamma,
        }
    }
}

/// `w(t) = pi(x'gamma - z'B(t))`
pub fn cure_weight(t: f64, cov: &CovariatePair, state: &ParameterState) -> f64 {
    logistic(cov.x().dot(&state.gamma) - cov.z().dot(&state.cumulative_at(t)))
}

/// `pi e^{-z'B} / (1 - pi + pi e^{-z'B})`, the mixture form of [`cure_weight`].
pub fn cure_weight_mixture(t: f64, cov: &CovariatePair, state: &ParameterState) -> f64 {
    let pi = logistic(cov.x().dot(&state.gamma));
    let s = (-cov.z().dot(&state.cumulative_at(t))).exp();
    pi * s / (1.0 - pi + pi * s)
}

/// `1 - pi(x'gamma) + pi(x'gamma) exp(-z'B(t))`
pub fn population_survival(t: f64, cov: &CovariatePair, state: &ParameterState) -> f64 {
    let pi = logistic(cov.x().dot(&state.gamma));
    1.0 - pi + pi * (-cov.z().dot(&state.cumulative_at(t))).exp()
}

/// `(B_0(t), .., B_{q-1}(t), gamma_0, .., gamma_{p-1})`
pub fn project_ht(theta: &Theta, t: f64) -> DVector<f64> {
    let b = theta.beta.cumulative_at(t);
    DVector::from_iterator(
        theta.q() + theta.p(),
        b.iter().copied().chain(theta.gamma.iter().copied()),
    )
}

/// The `(q + p) x (qK + p)` matrix with `H_t theta = (B(t), gamma)`.
pub fn ht_matrix(partition: &Partition, q: usize, p: usize, t: f64) -> DMatrix<f64> {
    let k = partition.count();
    let mut h = DMatrix::zeros(q + p, q * k + p);
    for j in 0..k {
        let r = partition.occupancy(t, j);
        for l in 0..q {
            h[(l, j * q + l)] = r;
        }
    }
    for g in 0..p {
        h[(q + g, q * k + g)] = 1.0;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn curve_state(b: &[f64], gamma: &[f64]) -> ParameterState {
        let curve = CumulativeCurve::new(
            b.len(),
            vec![1.0],
            vec![dv(b)],
            Interpolation::StepRightContinuous,
        )
        .unwrap();
        ParameterState {
            latency: Latency::Curve(curve),
            gamma: dv(gamma),
        }
    }

    #[test]
    fn logistic_values() {
        assert_eq!(logistic(0.0), 0.5);
        assert!((logistic(38.0) - 1.0).abs() <= 1e-15);
        for v in -5..=5 {
            let v = v as f64;
            assert!((logistic(v) + logistic(-v) - 1.0).abs() < 1e-15);
        }
        assert!(logistic(-700.0) > 0.0 && logistic(-700.0).is_finite());
        assert_eq!(logistic(700.0), 1.0);
    }

    #[test]
    fn softplus_matches_naive() {
        for v in [-2.0, 0.0, 0.3, 5.0, 40.0] {
            let naive = (1.0f64 + f64::exp(v)).ln();
            assert!((softplus(v) - naive).abs() < 1e-12 * naive);
        }
        let e = (-30f64).exp();
        assert!((softplus(-30.0) - (e - 0.5 * e * e)).abs() < 1e-12 * e);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn covariates_require_intercepts() {
        assert!(CovariatePair::new(dv(&[2.0]), dv(&[1.0])).is_err());
        assert!(CovariatePair::new(dv(&[1.0, f64::NAN]), dv(&[1.0])).is_err());
        let c = CovariatePair::from_columns(&[0.3], &[]).unwrap();
        assert_eq!((c.p(), c.q()), (2, 1));
    }

    #[test]
    fn cure_weight_closed_forms() {
        let cov = CovariatePair::from_columns(&[], &[]).unwrap();
        let state = curve_state(&[2f64.ln()], &[0.0]);
        // before the first knot B = 0
        assert_eq!(cure_weight(0.5, &cov, &state), 0.5);
        assert!((cure_weight(1.0, &cov, &state) - 1.0 / 3.0).abs() < 1e-15);
        assert!((cure_weight_mixture(1.0, &cov, &state) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn population_survival_examples() {
        let cov = CovariatePair::from_columns(&[], &[]).unwrap();
        let gamma = (0.6f64 / 0.4).ln();
        let part = Partition::new(2.0, 1).unwrap();
        let state: ParameterState = Theta {
            beta: StepCoefficients::constant(part, dv(&[1.0])),
            gamma: dv(&[gamma]),
        }
        .into();
        assert_eq!(population_survival(0.0, &cov, &state), 1.0);
        let s1 = population_survival(1.0, &cov, &state);
        assert!((s1 - (0.4 + 0.6 * (-1f64).exp())).abs() < 1e-14);
        let cured = ParameterState {
            gamma: dv(&[-800.0]),
            ..state
        };
        assert_eq!(population_survival(1.5, &cov, &cured), 1.0);
    }

    #[test]
    fn hazard_lookup() {
        let z = dv(&[1.0]);
        let c = vec![CoefficientFn::Constant { value: 0.7 }];
        assert_eq!(hazard_value(1.0, &z, &c, true).unwrap(), 0.7);
        let part = Partition::new(2.0, 2).unwrap();
        let steps = StepCoefficients::new(part, vec![dv(&[1.0]), dv(&[2.0])]).unwrap();
        assert_eq!(hazard_value(1.5, &z, &steps, true).unwrap(), 2.0);
        // W_j is closed on the left
        assert_eq!(hazard_value(1.0, &z, &steps, true).unwrap(), 2.0);
        let b0 = CoefficientFn::Polynomial {
            coefficients: vec![0.5, 0.5, -0.25],
        };
        assert!((b0.value(1.0) - 0.75).abs() < 1e-15);
        let neg = vec![CoefficientFn::Constant { value: -0.1 }];
        assert!(matches!(
            hazard_value(0.3, &z, &neg, true),
            Err(Error::PositivityViolation { .. })
        ));
        assert_eq!(hazard_value(0.3, &z, &neg, false).unwrap(), -0.1);
    }

    #[test]
    fn occupancy_examples() {
        let part = Partition::new(2.0, 4).unwrap();
        // window 1 is [0.5, 1.0)
        assert_eq!(window_occupancy(0.3, &part, 1), 0.0);
        assert_eq!(window_occupancy(0.75, &part, 1), 0.25);
        assert_eq!(window_occupancy(1.7, &part, 1), 0.5);
        assert_eq!(part.window_of(2.0), 3);
        assert_eq!(part.window_of(0.5), 1);
    }

    #[test]
    fn ht_layout_matches_displayed_pattern() {
        let part = Partition::new(3.0, 3).unwrap();
        let t = 1.5;
        let h = ht_matrix(&part, 2, 2, t);
        let (r1, r2, r3) = (1.0, 0.5, 0.0);
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(4, 8, &[
            r1, 0.0, r2, 0.0, r3, 0.0, 0.0, 0.0,
            0.0, r1, 0.0, r2, 0.0, r3, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        ]);
        assert_eq!(h, expected);
    }

    #[test]
    fn project_ht_constant_and_origin() {
        let part = Partition::new(2.0, 5).unwrap();
        let theta = Theta {
            beta: StepCoefficients::constant(part, dv(&[0.5, -0.2])),
            gamma: dv(&[0.1, 0.2]),
        };
        let at0 = project_ht(&theta, 0.0);
        assert_eq!(at0.as_slice(), &[0.0, 0.0, 0.1, 0.2]);
        let at = project_ht(&theta, 1.3);
        assert!((at[0] - 0.65).abs() < 1e-15 && (at[1] + 0.26).abs() < 1e-15);
    }

    #[test]
    fn step_curve_is_piecewise_linear() {
        let part = Partition::new(1.0, 2).unwrap();
        let steps = StepCoefficients::new(part, vec![dv(&[1.0]), dv(&[3.0])]).unwrap();
        let curve = steps.to_curve();
        assert_eq!(curve.evaluate(0.0)[0], 0.0);
        assert!((curve.evaluate(0.25)[0] - 0.25).abs() < 1e-15);
        assert!((curve.evaluate(0.75)[0] - 1.25).abs() < 1e-15);
        assert!((curve.evaluate(5.0)[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn coefficient_integrals() {
        let poly = CoefficientFn::Polynomial {
            coefficients: vec![0.5, 0.5, -0.25],
        };
        let t: f64 = 1.5;
        let exact = 0.5 * t + 0.25 * t * t - t.powi(3) / 12.0;
        assert!((poly.integral(t) - exact).abs() < 1e-14);
        // rational 1/(1+t) integrates to ln(1+t)
        let rat = CoefficientFn::Rational {
            numerator: vec![1.0],
            denominator: vec![1.0, 1.0],
        };
        assert!((rat.integral(t) - (1.0 + t).ln()).abs() < 1e-10);
        let pole = CoefficientFn::Rational {
            numerator: vec![0.0, 1.0],
            denominator: vec![0.5, 0.0, -8.0],
        };
        assert!(pole.integral(0.2).is_finite());
        assert!(pole.integral(0.3).is_nan());
        let step = CoefficientFn::Step {
            horizon: 2.0,
            values: vec![1.0, 3.0],
        };
        assert!((step.integral(1.5) - 2.5).abs() < 1e-15);
    }
}
