//! Scenario configuration and i.i.d. data generation from the cure model.
//!
//! Each subject `i` draws from its own ChaCha8 stream `(seed, i)`, so the
//! output does not depend on the number of worker threads.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logistic, CoefficientFn, CovariatePair, SubjectRecord};
use crate::quad;

/// Number of grid points used by the positivity pre-check.
pub const POSITIVITY_GRID: usize = 2048;

/// Distribution of one non-intercept covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CovariateLaw {
    Normal { mean: f64, sd: f64 },
    /// Normal restricted to `[lower, upper]`, sampled by rejection.
    TruncatedNormal { mean: f64, sd: f64, lower: f64, upper: f64 },
    Uniform { lower: f64, upper: f64 },
    Constant { value: f64 },
    /// Reuse incidence column `column` (zero-based, intercept excluded). Latency columns only.
    Shared { column: usize },
}

impl CovariateLaw {
    fn validate(&self, n_x: usize, latency: bool) -> Result<()> {
        let ok = match *self {
            Self::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd > 0.0,
            Self::TruncatedNormal {
                mean,
                sd,
                lower,
                upper,
            } => {
                mean.is_finite()
                    && sd > 0.0
                    && lower < upper
                    && lower.is_finite()
                    && upper.is_finite()
                    // keep rejection sampling cheap
                    && standard_normal_mass((lower - mean) / sd, (upper - mean) / sd) > 1e-3
            }
            Self::Uniform { lower, upper } => lower.is_finite() && upper.is_finite() && lower < upper,
            Self::Constant { value } => value.is_finite(),
            Self::Shared { column } => latency && column < n_x,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid covariate law {self:?}")))
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            Self::TruncatedNormal {
                mean,
                sd,
                lower,
                upper,
            } => loop {
                let v = mean + sd * rng.sample::<f64, _>(StandardNormal);
                if (lower..=upper).contains(&v) {
                    break v;
                }
            },
            Self::Uniform { lower, upper } => lower + (upper - lower) * rng.random::<f64>(),
            Self::Constant { value } => value,
            Self::Shared { .. } => unreachable!("shared columns are copied, not sampled"),
        }
    }
}

fn standard_normal_mass(a: f64, b: f64) -> f64 {
    let phi = |v: f64| (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
    quad::adaptive_simpson(&phi, a.max(-12.0), b.min(12.0), 1e-8)
}

/// Censoring distribution, independent of the covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CensorLaw {
    /// `C ~ Uniform(0, upper)` with `upper <= horizon`.
    Uniform { upper: f64 },
    /// `C = horizon` for everyone.
    Administrative,
    /// No censoring inside the window; treated as administrative censoring at the horizon.
    None,
}

impl CensorLaw {
    /// `H_c(s-) = P(C < s)`.
    pub fn cdf_left(&self, s: f64, horizon: f64) -> f64 {
        match *self {
            Self::Uniform { upper } => (s / upper).clamp(0.0, 1.0),
            Self::Administrative | Self::None => {
                if s > horizon {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R, horizon: f64) -> f64 {
        match *self {
            // 1 - U lies in (0, 1], so C > 0
            Self::Uniform { upper } => upper * (1.0 - rng.random::<f64>()),
            Self::Administrative | Self::None => horizon,
        }
    }
}

/// Declarative data-generating mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n: usize,
    pub horizon: f64,
    /// `(gamma_0, gamma_1, ..)`, intercept first.
    pub gamma: Vec<f64>,
    /// `beta_0(t), beta_1(t), ..`, intercept first.
    pub beta: Vec<CoefficientFn>,
    /// Laws of `x_1, x_2, ..`.
    #[serde(default)]
    pub x_laws: Vec<CovariateLaw>,
    /// Laws of `z_1, z_2, ..`.
    #[serde(default)]
    pub z_laws: Vec<CovariateLaw>,
    pub censoring: CensorLaw,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn p(&self) -> usize {
        self.gamma.len()
    }

    pub fn q(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.gamma.len() != self.x_laws.len() + 1 {
            return Err(Error::Config(format!(
                "gamma has {} entries but there are {} incidence covariates plus the intercept",
                self.gamma.len(),
                self.x_laws.len()
            )));
        }
        if self.beta.len() != self.z_laws.len() + 1 {
            return Err(Error::Config(format!(
                "beta has {} components but there are {} latency covariates plus the intercept",
                self.beta.len(),
                self.z_laws.len()
            )));
        }
        if self.gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("gamma must be finite".into()));
        }
        for b in &self.beta {
            b.validate()?;
        }
        for law in &self.x_laws {
            law.validate(self.x_laws.len(), false)?;
        }
        for law in &self.z_laws {
            law.validate(self.x_laws.len(), true)?;
        }
        if let CensorLaw::Uniform { upper } = self.censoring {
            if !(upper > 0.0 && upper <= self.horizon) {
                return Err(Error::Config(format!(
                    "uniform censoring needs 0 < upper <= horizon (got {upper})"
                )));
            }
        }
        Ok(())
    }

    /// True `B(t)`.
    pub fn true_cumulative(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(self.q(), self.beta.iter().map(|b| b.integral(t)))
    }

    /// Draws one covariate pair and returns it.
    pub(crate) fn draw_covariates<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = self.x_laws.iter().map(|l| l.sample(rng)).collect();
        let z = self
            .z_laws
            .iter()
            .map(|l| match *l {
                CovariateLaw::Shared { column } => x[column],
                _ => l.sample(rng),
            })
            .collect();
        (x, z)
    }
}

/// Well-behaved substitute for the published simulation: constant coefficients
/// and a latency covariate bounded at three standard deviations, so that the
/// hazard `0.5 + 0.25 z_1` stays positive.
pub fn desk_scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        n: 2000,
        horizon: 2.0,
        gamma: vec![0.5, 1.0],
        beta: vec![
            CoefficientFn::Constant { value: 0.5 },
            CoefficientFn::Constant { value: 0.25 },
        ],
        x_laws: vec![CovariateLaw::Normal { mean: 0.0, sd: 1.0 }],
        z_laws: vec![CovariateLaw::TruncatedNormal {
            mean: 0.0,
            sd: 0.5,
            lower: -1.5,
            upper: 1.5,
        }],
        censoring: CensorLaw::Uniform { upper: 2.0 },
        seed,
    }
}

/// The published simulation taken literally, including `beta_1(t) = t / (1/2 - 8 t^2)`.
pub fn literal_scenario(seed: u64) -> ScenarioConfig {
    let pole = vec![0.5, 0.0, -8.0];
    ScenarioConfig {
        n: 5000,
        horizon: 2.0,
        gamma: vec![0.54, 2.60],
        beta: vec![
            CoefficientFn::Polynomial {
                coefficients: vec![0.5, 0.5, -0.25],
            },
            CoefficientFn::Rational {
                numerator: vec![0.0, 1.0],
                denominator: pole.clone(),
            },
            CoefficientFn::Rational {
                numerator: vec![0.0, -0.5],
                denominator: pole,
            },
        ],
        x_laws: vec![CovariateLaw::Normal { mean: 0.0, sd: 1.0 }],
        z_laws: vec![
            CovariateLaw::Normal { mean: 0.0, sd: 0.5 },
            CovariateLaw::Normal { mean: 0.0, sd: 0.5 },
        ],
        censoring: CensorLaw::Uniform { upper: 2.0 },
        seed,
    }
}

/// Latent quantities of one simulated subject.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTruth {
    pub susceptible: bool,
    /// `T*`, infinite for cured subjects and for events beyond the horizon.
    pub latent_time: f64,
    pub censor_time: f64,
    /// Whether the hazard was nonpositive somewhere on the check grid.
    pub positivity_violation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub records: Vec<SubjectRecord>,
    pub hidden: Vec<HiddenTruth>,
}

impl SimulatedDataset {
    pub fn positivity_violations(&self) -> usize {
        self.hidden.iter().filter(|h| h.positivity_violation).count()
    }
}

/// Positivity handling for [`draw_dataset_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositivityPolicy {
    /// Reject the draw with [`Error::PositivityViolation`].
    #[default]
    Reject,
    /// Replace the hazard by `max(0, z'beta(t))` on the check grid and count offending subjects.
    Clip,
}

/// Coefficient integrals with a cached grid for coefficients without a closed form.
struct Integrals<'a> {
    funcs: &'a [CoefficientFn],
    step: f64,
    cached: Vec<Option<Vec<f64>>>,
}

impl<'a> Integrals<'a> {
    const CELLS: usize = 256;

    fn new(funcs: &'a [CoefficientFn], horizon: f64) -> Self {
        let step = horizon / Self::CELLS as f64;
        let cached = funcs
            .iter()
            .map(|f| {
                f.closed_form_integral(0.0).is_none().then(|| {
                    let mut acc = vec![0.0; Self::CELLS + 1];
                    for k in 0..Self::CELLS {
                        let (a, b) = (k as f64 * step, (k + 1) as f64 * step);
                        acc[k + 1] =
                            acc[k] + quad::adaptive_simpson(&|s| f.value(s), a, b, 1e-12);
                    }
                    acc
                })
            })
            .collect();
        Self {
            funcs,
            step,
            cached,
        }
    }

    fn integral(&self, l: usize, t: f64) -> f64 {
        match &self.cached[l] {
            None => self.funcs[l].closed_form_integral(t).unwrap_or(f64::NAN),
            Some(acc) => {
                let k = ((t / self.step).floor() as usize).min(Self::CELLS - 1);
                let a = k as f64 * self.step;
                let f = &self.funcs[l];
                acc[k] + quad::adaptive_simpson(&|s| f.value(s), a, t, 1e-12)
            }
        }
    }

    /// `A_z(t) = sum_l z_l B_l(t)`
    fn cumulative_hazard(&self, z: &DVector<f64>, t: f64) -> f64 {
        (0..self.funcs.len()).map(|l| z[l] * self.integral(l, t)).sum()
    }
}

/// Smallest `t` in `[0, horizon]` with `A(t) >= e`, or `+inf` when `A(horizon) < e`.
pub fn invert_cumulative_hazard<F: Fn(f64) -> f64>(a: F, e: f64, horizon: f64) -> Result<f64> {
    const MONOTONE_TOL: f64 = 1e-10;
    let (mut lo, mut hi) = (0.0, horizon);
    let (mut a_lo, mut a_hi) = (a(lo), a(hi));
    if a_hi < a_lo - MONOTONE_TOL {
        return Err(Error::NonMonotone { time: horizon });
    }
    if a_hi < e {
        return Ok(f64::INFINITY);
    }
    if a_lo >= e {
        return Ok(0.0);
    }
    let tol = 1e-12 * horizon;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let a_mid = a(mid);
        if a_mid < a_lo - MONOTONE_TOL || a_mid > a_hi + MONOTONE_TOL {
            return Err(Error::NonMonotone { time: mid });
        }
        if a_mid >= e {
            hi = mid;
            a_hi = a_mid;
        } else {
            lo = mid;
            a_lo = a_mid;
        }
    }
    Ok(hi)
}

/// `beta(t_k)` on the positivity grid, one row per grid point.
struct HazardGrid {
    times: Vec<f64>,
    betas: Vec<Vec<f64>>,
}

impl HazardGrid {
    fn new(funcs: &[CoefficientFn], horizon: f64) -> Self {
        let times: Vec<f64> = (0..POSITIVITY_GRID)
            .map(|k| horizon * k as f64 / (POSITIVITY_GRID - 1) as f64)
            .collect();
        let betas = times
            .iter()
            .map(|&t| funcs.iter().map(|f| f.value(t)).collect())
            .collect();
        Self { times, betas }
    }

    fn hazard(&self, z: &DVector<f64>, k: usize) -> f64 {
        self.betas[k].iter().zip(z.iter()).map(|(b, z)| b * z).sum()
    }

    /// The grid point with the most negative hazard, if any is nonpositive.
    /// Non-finite values count as the worst.
    fn worst_violation(&self, z: &DVector<f64>) -> Option<(f64, f64)> {
        let mut worst: Option<(f64, f64)> = None;
        for k in 0..self.times.len() {
            let h = self.hazard(z, k);
            let key = if h.is_finite() { h } else { f64::NEG_INFINITY };
            if key <= 0.0 && worst.is_none_or(|(_, w)| key < w) {
                worst = Some((self.times[k], key));
            }
        }
        worst
    }

    /// Piecewise-linear cumulative of the clipped hazard, by the trapezoid rule.
    fn clipped_cumulative(&self, z: &DVector<f64>) -> Vec<f64> {
        let h: Vec<f64> = (0..self.times.len())
            .map(|k| {
                let v = self.hazard(z, k);
                if v.is_finite() {
                    v.max(0.0)
                } else {
                    0.0
                }
            })
            .collect();
        let mut acc = vec![0.0; h.len()];
        for k in 1..h.len() {
            acc[k] = acc[k - 1] + 0.5 * (h[k] + h[k - 1]) * (self.times[k] - self.times[k - 1]);
        }
        acc
    }
}

fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    let k = times.partition_point(|&s| s <= t);
    if k == 0 {
        return values[0];
    }
    if k == times.len() {
        return values[k - 1];
    }
    let a = (t - times[k - 1]) / (times[k] - times[k - 1]);
    values[k - 1] + a * (values[k] - values[k - 1])
}

/// Random stream of subject `index` under `seed`.
pub fn subject_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// SplitMix64 finaliser, used to derive independent seeds.
pub fn splitmix64(mut v: u64) -> u64 {
    v = v.wrapping_add(0x9e37_79b9_7f4a_7c15);
    v = (v ^ (v >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    v = (v ^ (v >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    v ^ (v >> 31)
}

/// Seed of replication `rep` under a master seed.
pub fn replication_seed(master: u64, rep: u64) -> u64 {
    splitmix64(splitmix64(master) ^ rep)
}

/// Draws a dataset, rejecting configurations with a nonpositive hazard.
pub fn draw_dataset(config: &ScenarioConfig) -> Result<SimulatedDataset> {
    draw_dataset_with(config, PositivityPolicy::Reject)
}

pub fn draw_dataset_with(
    config: &ScenarioConfig,
    policy: PositivityPolicy,
) -> Result<SimulatedDataset> {
    config.validate()?;
    let integrals = Integrals::new(&config.beta, config.horizon);
    let grid = HazardGrid::new(&config.beta, config.horizon);
    let gamma = DVector::from_column_slice(&config.gamma);
    let tau = config.horizon;

    let draw_one = |i: usize| -> Result<(SubjectRecord, HiddenTruth)> {
        let mut rng = subject_rng(config.seed, i as u64);
        let (x_rest, z_rest) = config.draw_covariates(&mut rng);
        let cov = CovariatePair::from_columns(&x_rest, &z_rest)?;
        let susceptible = rng.random::<f64>() < logistic(cov.x().dot(&gamma));
        let e: f64 = rng.sample(Exp1);
        let censor_time = config.censoring.sample(&mut rng, tau);

        let violation = grid.worst_violation(cov.z());
        if let (Some((time, value)), PositivityPolicy::Reject) = (violation, policy) {
            return Err(Error::PositivityViolation { time, value });
        }
        let latent_time = if !susceptible {
            f64::INFINITY
        } else if violation.is_some() {
            let acc = grid.clipped_cumulative(cov.z());
            invert_cumulative_hazard(|t| interpolate(&grid.times, &acc, t), e, tau)?
        } else {
            invert_cumulative_hazard(|t| integrals.cumulative_hazard(cov.z(), t), e, tau)?
        };
        let event = latent_time <= censor_time;
        let time = if event { latent_time } else { censor_time };
        let time = if time > 0.0 { time } else { f64::MIN_POSITIVE };
        Ok((
            SubjectRecord::new(time, event, cov)?,
            HiddenTruth {
                susceptible,
                latent_time,
                censor_time,
                positivity_violation: violation.is_some(),
            },
        ))
    };

    let drawn: Vec<Result<(SubjectRecord, HiddenTruth)>> =
        (0..config.n).into_par_iter().map(draw_one).collect();
    let mut records = Vec::with_capacity(config.n);
    let mut hidden = Vec::with_capacity(config.n);
    for item in drawn {
        let (r, h) = item?;
        records.push(r);
        hidden.push(h);
    }
    Ok(SimulatedDataset { records, hidden })
}

/// `P(delta = 1)` with 20000 covariate draws and a 2000-point time grid.
pub fn event_probability(config: &ScenarioConfig) -> f64 {
    event_probability_with(config, 20_000, 2000)
}

/// `P(delta = 1) = E[ pi(X'gamma) int_0^tau {1 - H_c(s-)} Z'beta(s) exp(-A_Z(s)) ds ]`,
/// by Monte Carlo over covariates and the trapezoid rule in time. The hazard is
/// integrated numerically here, independently of the sampler's closed forms.
pub fn event_probability_with(config: &ScenarioConfig, draws: usize, grid: usize) -> f64 {
    let tau = config.horizon;
    let times: Vec<f64> = (0..grid)
        .map(|k| tau * k as f64 / (grid - 1) as f64)
        .collect();
    let betas: Vec<Vec<f64>> = times
        .iter()
        .map(|&t| config.beta.iter().map(|f| f.value(t)).collect())
        .collect();
    let survival_c: Vec<f64> = times
        .iter()
        .map(|&t| 1.0 - config.censoring.cdf_left(t, tau))
        .collect();
    let seed = splitmix64(config.seed ^ 0x6576_656e_745f_7072);
    let total: f64 = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = subject_rng(seed, d as u64);
            let (x_rest, z_rest) = config.draw_covariates(&mut rng);
            let pi = logistic(
                config.gamma[0]
                    + x_rest
                        .iter()
                        .zip(&config.gamma[1..])
                        .map(|(x, g)| x * g)
                        .sum::<f64>(),
            );
            let hazard: Vec<f64> = betas
                .iter()
                .map(|b| b[0] + b[1..].iter().zip(&z_rest).map(|(b, z)| b * z).sum::<f64>())
                .collect();
            let mut cum = 0.0;
            let mut density = Vec::with_capacity(grid);
            density.push(hazard[0] * survival_c[0]);
            for k in 1..grid {
                cum += 0.5 * (hazard[k] + hazard[k - 1]) * (times[k] - times[k - 1]);
                density.push(hazard[k] * (-cum).exp() * survival_c[k]);
            }
            pi * quad::trapezoid(&times, &density)
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    total / draws as f64
}
