//! EM-type estimation of the cure model: the nonparametric estimator, the
//! locally constant K-window estimator, and the estimating equations that
//! characterise the latter.

use nalgebra::{DMatrix, DVector};

use crate::aalen::{fit_aalen_with, weighted_aalen, AalenFit};
use crate::error::{Error, Result};
use crate::inference::psi_jacobian;
use crate::linalg::{add_outer, inverse_with_rcond, sup_norm};
use crate::model::{
    cure_weight, dimensions, logistic, softplus, CumulativeCurve, Latency, ParameterState,
    Partition, StepCoefficients, SubjectRecord, Theta,
};
use crate::quad;

/// Largest `|x'gamma|` accepted before the incidence fit is declared separated.
const SEPARATION_LINEAR_PREDICTOR: f64 = 20.0;
/// Gradient tolerance of the incidence Newton iterations.
const GAMMA_GRADIENT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub gamma_newton_max: usize,
    pub ridge: f64,
    pub condition: f64,
    /// Squared-extrapolation acceleration of the EM map; the fixed point is unchanged.
    pub accelerate: bool,
    /// Locally constant mode: once the EM change drops below `refine_below`,
    /// take safeguarded Newton steps on `Psi_n` between EM steps.
    pub newton_refine: bool,
    pub refine_below: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 500,
            gamma_newton_max: 50,
            ridge: 1e-8,
            condition: 1e-10,
            accelerate: true,
            newton_refine: true,
            refine_below: 1e-2,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tolerance > 0.0
            && self.max_iterations > 0
            && self.gamma_newton_max > 0
            && self.ridge > 0.0
            && self.condition > 0.0
            && self.refine_below > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("fit options must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitMode {
    Nonparametric,
    /// `K` equal windows on `[0, horizon]`.
    LocallyConstant { windows: usize, horizon: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub state: ParameterState,
    pub iterations: usize,
    pub converged: bool,
    /// `||Psi_n(theta)||_inf`, locally constant mode only.
    pub residual: Option<f64>,
    pub truncation: Option<f64>,
    /// Parameter change of every iteration.
    pub trace: Vec<f64>,
    /// Whether some incidence update fell back to the ridge objective.
    pub separation: bool,
    pub degenerate_windows: Vec<usize>,
    /// Accepted Newton refinement steps, locally constant mode only.
    pub newton_steps: usize,
    /// Final weighted Aalen fit, nonparametric mode only.
    pub latency_fit: Option<AalenFit>,
}

impl FitReport {
    /// Turns a non-converged report into [`Error::NotConverged`].
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
                last_change: self.trace.last().copied().unwrap_or(f64::NAN),
            })
        }
    }

    pub fn theta(&self) -> Option<Theta> {
        self.state.as_theta()
    }
}

/// `E(U | D) = delta + (1 - delta) w(T)`
pub fn posterior_weight(record: &SubjectRecord, state: &ParameterState) -> f64 {
    if record.event {
        1.0
    } else {
        cure_weight(record.time, &record.covariates, state)
    }
}

pub fn posterior_weights(data: &[SubjectRecord], state: &ParameterState) -> Vec<f64> {
    data.iter().map(|r| posterior_weight(r, state)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaFit {
    pub gamma: DVector<f64>,
    pub iterations: usize,
    /// The unpenalised Newton iterations failed and the ridge estimate was returned.
    pub separation: bool,
    /// Whether the returned estimate meets the gradient tolerance.
    pub converged: bool,
}

/// `n^{-1} sum [u eta - log(1 + e^eta)] - ridge/2 |gamma|^2`
fn logistic_objective(data: &[SubjectRecord], u: &[f64], gamma: &DVector<f64>, ridge: f64) -> f64 {
    let n = data.len() as f64;
    let ll: f64 = data
        .iter()
        .zip(u)
        .map(|(r, &ui)| {
            let eta = r.covariates.x().dot(gamma);
            ui * eta - softplus(eta)
        })
        .sum();
    ll / n - 0.5 * ridge * gamma.norm_squared()
}

enum NewtonOutcome {
    Converged(DVector<f64>, usize),
    Failed,
}

fn newton_logistic(
    data: &[SubjectRecord],
    u: &[f64],
    start: &DVector<f64>,
    ridge: f64,
    opts: &FitOptions,
    guard_separation: bool,
) -> NewtonOutcome {
    let p = start.len();
    let n = data.len() as f64;
    let mut gamma = start.clone();
    let mut objective = logistic_objective(data, u, &gamma, ridge);
    for it in 0..=opts.gamma_newton_max {
        let mut grad = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        let mut max_eta: f64 = 0.0;
        for (r, &ui) in data.iter().zip(u) {
            let x = r.covariates.x();
            let eta = x.dot(&gamma);
            max_eta = max_eta.max(eta.abs());
            let pi = logistic(eta);
            grad.axpy((ui - pi) / n, x, 1.0);
            add_outer(&mut info, x, pi * (1.0 - pi) / n);
        }
        if guard_separation && max_eta > SEPARATION_LINEAR_PREDICTOR {
            return NewtonOutcome::Failed;
        }
        grad.axpy(-ridge, &gamma, 1.0);
        for d in 0..p {
            info[(d, d)] += ridge;
        }
        if sup_norm(&grad) < GAMMA_GRADIENT_TOL {
            return NewtonOutcome::Converged(gamma, it);
        }
        if it == opts.gamma_newton_max {
            break;
        }
        let Some((inv, rc)) = inverse_with_rcond(&info) else {
            return NewtonOutcome::Failed;
        };
        if rc < opts.condition {
            return NewtonOutcome::Failed;
        }
        let step = inv * &grad;
        let mut scale = 1.0;
        loop {
            let trial = &gamma + &step * scale;
            let value = logistic_objective(data, u, &trial, ridge);
            // accept changes within rounding of the objective
            if value >= objective - 1e-13 * (1.0 + objective.abs()) {
                gamma = trial;
                objective = value;
                break;
            }
            if scale < 1e-10 {
                return NewtonOutcome::Failed;
            }
            scale *= 0.5;
        }
    }
    NewtonOutcome::Failed
}

/// Maximiser of the weighted logistic likelihood `sum [u log pi + (1 - u) log(1 - pi)]`.
pub fn gamma_update(
    data: &[SubjectRecord],
    u: &[f64],
    start: Option<&DVector<f64>>,
    opts: &FitOptions,
) -> Result<GammaFit> {
    let (p, _) = dimensions(data)?;
    if u.len() != data.len() || u.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::Config("weights must lie in [0, 1], one per subject".into()));
    }
    let zero = DVector::zeros(p);
    let start = start.unwrap_or(&zero);
    if let NewtonOutcome::Converged(gamma, iterations) =
        newton_logistic(data, u, start, 0.0, opts, true)
    {
        return Ok(GammaFit {
            gamma,
            iterations,
            separation: false,
            converged: true,
        });
    }
    let ridge_start = if start.iter().all(|g| g.is_finite()) {
        start
    } else {
        &zero
    };
    match newton_logistic(data, u, ridge_start, opts.ridge, opts, false) {
        NewtonOutcome::Converged(gamma, iterations) => Ok(GammaFit {
            gamma,
            iterations,
            separation: true,
            converged: true,
        }),
        NewtonOutcome::Failed => {
            // last resort: the ridge problem from the origin, reported as unconverged
            let gamma = match newton_logistic(data, u, &zero, opts.ridge, opts, false) {
                NewtonOutcome::Converged(g, _) => g,
                NewtonOutcome::Failed => zero.clone(),
            };
            Ok(GammaFit {
                gamma,
                iterations: opts.gamma_newton_max,
                separation: true,
                converged: false,
            })
        }
    }
}

/// Nonparametric latency update `dB(s) = G_n(s, phi)^{-1} n^{-1} sum Z_i dN_i(s)`.
pub fn b_update_nonparametric(
    data: &[SubjectRecord],
    state: &ParameterState,
    opts: &FitOptions,
) -> Result<AalenFit> {
    weighted_aalen(data, &posterior_weights(data, state), opts.condition)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowUpdate {
    pub beta: StepCoefficients,
    pub degenerate: Vec<usize>,
}

/// `beta_j = G_{n,j}^{-1} n^{-1} sum Z_i int_{W_j} dN_i` with
/// `G_{n,j} = n^{-1} sum Z_i Z_i' r_j(T_i) u_i`, for given weights `u`.
pub fn beta_update_with_weights(
    data: &[SubjectRecord],
    u: &[f64],
    partition: &Partition,
    opts: &FitOptions,
) -> Result<WindowUpdate> {
    let (_, q) = dimensions(data)?;
    let k = partition.count();
    let n = data.len() as f64;
    let mut designs = vec![DMatrix::zeros(q, q); k];
    let mut counts = vec![DVector::zeros(q); k];
    for (r, &ui) in data.iter().zip(u) {
        let z = r.covariates.z();
        let last = partition.window_of(r.time);
        for (j, design) in designs.iter_mut().enumerate().take(last + 1) {
            let occ = partition.occupancy(r.time, j);
            if occ > 0.0 {
                add_outer(design, z, occ * ui / n);
            }
        }
        if r.event && r.time <= partition.horizon() {
            counts[last].axpy(1.0 / n, z, 1.0);
        }
    }
    let mut degenerate = Vec::new();
    let values = designs
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(j, (g, c))| match inverse_with_rcond(g) {
            Some((inv, rc)) if rc >= opts.condition => inv * c,
            _ => {
                degenerate.push(j);
                DVector::zeros(q)
            }
        })
        .collect();
    Ok(WindowUpdate {
        beta: StepCoefficients::new(*partition, values)?,
        degenerate,
    })
}

/// Locally constant latency update with the posterior weights of `theta`.
pub fn beta_update_locally_constant(
    data: &[SubjectRecord],
    theta: &Theta,
    opts: &FitOptions,
) -> Result<WindowUpdate> {
    let state: ParameterState = theta.clone().into();
    beta_update_with_weights(data, &posterior_weights(data, &state), theta.partition(), opts)
}

/// Per-subject terms of `Upsilon_n(theta, D, u)`; their mean is the system.
pub fn upsilon_contributions(
    data: &[SubjectRecord],
    theta: &Theta,
    u: &[f64],
) -> Vec<DVector<f64>> {
    let part = theta.partition();
    let (q, k, p) = (theta.q(), part.count(), theta.p());
    data.iter()
        .zip(u)
        .map(|(r, &ui)| {
            let (x, z) = (r.covariates.x(), r.covariates.z());
            let mut out = DVector::zeros(q * k + p);
            for j in 0..k {
                let a = r.delta() * part.indicator(r.time, j)
                    - part.occupancy(r.time, j) * ui * z.dot(theta.beta.window(j));
                if a != 0.0 {
                    out.rows_mut(j * q, q).axpy(a, z, 0.0);
                }
            }
            let pi = logistic(x.dot(&theta.gamma));
            out.rows_mut(q * k, p).axpy(ui - pi, x, 0.0);
            out
        })
        .collect()
}

fn mean_of(rows: &[DVector<f64>], dim: usize) -> DVector<f64> {
    let mut acc = DVector::zeros(dim);
    for r in rows {
        acc += r;
    }
    if rows.is_empty() {
        acc
    } else {
        acc / rows.len() as f64
    }
}

/// Complete-data system `Upsilon_n(theta, D, u)` for arbitrary weights.
pub fn upsilon_system(data: &[SubjectRecord], theta: &Theta, u: &[f64]) -> DVector<f64> {
    mean_of(&upsilon_contributions(data, theta, u), theta.dim())
}

/// Per-subject terms of `Psi_n^K(theta)`.
pub fn psi_contributions(data: &[SubjectRecord], theta: &Theta) -> Vec<DVector<f64>> {
    let u: Vec<f64> = data
        .iter()
        .map(|r| r.delta() + (1.0 - r.delta()) * theta.weight(r.time, &r.covariates))
        .collect();
    upsilon_contributions(data, theta, &u)
}

/// Estimating system `Psi_n^K(theta)`, window blocks first and the incidence block last.
pub fn psi_system(data: &[SubjectRecord], theta: &Theta) -> DVector<f64> {
    mean_of(&psi_contributions(data, theta), theta.dim())
}

/// `int_a^b w(s) ds` for `w(s) = logistic(eta_a - c (s - a))`.
fn integrated_weight(eta_a: f64, c: f64, a: f64, b: f64, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    let span = b - a;
    if (c * span).abs() >= 1e-3 {
        (softplus(eta_a) - softplus(eta_a - c * span)) / c
    } else {
        quad::gauss_legendre_integral(|s| logistic(eta_a - c * (s - a)), a, b, rule)
    }
}

/// The system written as `n^{-1} sum int h(s) dM_i(s, theta)` with
/// `dM = dN - Y w Z'beta ds`, integrated in closed form window by window.
pub fn psi_martingale_form(data: &[SubjectRecord], theta: &Theta) -> DVector<f64> {
    let part = theta.partition();
    let (q, k, p) = (theta.q(), part.count(), theta.p());
    let rule = quad::gauss_legendre(16);
    let mut acc = DVector::zeros(q * k + p);
    for r in data {
        let (x, z) = (r.covariates.x(), r.covariates.z());
        let t = r.time;
        let delta = r.delta();
        let eta0 = x.dot(&theta.gamma);
        let w_t = theta.weight(t, &r.covariates);
        // the jump of N sits in the window holding T, which may start exactly at T
        if r.event && t <= part.horizon() {
            let j = part.window_of(t);
            acc.rows_mut(j * q, q).axpy(1.0, z, 1.0);
        }
        let mut eta_a = eta0;
        for j in 0..k {
            let a = part.cut(j);
            if t <= a {
                break;
            }
            let b = part.cut(j + 1).min(t);
            let c = z.dot(theta.beta.window(j));
            let eta_b = eta_a - c * (b - a);
            let r_t = part.occupancy(t, j);
            // int_{W_j, s <= T} w c ds
            let compensated = softplus(eta_a) - softplus(eta_b);
            // int_0^T r_j dw by parts
            let r_dw = r_t * w_t - integrated_weight(eta_a, c, a, b, &rule);
            let jump = -delta * (1.0 - w_t) * r_t * c;
            let block = jump - compensated - c * r_dw;
            acc.rows_mut(j * q, q).axpy(block, z, 1.0);
            eta_a = eta_b;
        }
        // h_{K+1} = x (1 - w), and (1 - w) w c ds = -dw
        let pi = logistic(eta0);
        let block = delta * (1.0 - w_t) + (w_t - pi);
        acc.rows_mut(q * k, p).axpy(block, x, 1.0);
    }
    if data.is_empty() {
        acc
    } else {
        acc / data.len() as f64
    }
}

fn curve_change(a: &CumulativeCurve, b: &CumulativeCurve) -> f64 {
    let mut knots: Vec<f64> = a.knots().iter().chain(b.knots()).copied().collect();
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    knots
        .iter()
        .map(|&t| sup_norm(&(a.evaluate(t) - b.evaluate(t))))
        .fold(0.0, f64::max)
}

fn state_change(a: &ParameterState, b: &ParameterState) -> f64 {
    let latency = match (&a.latency, &b.latency) {
        (Latency::Curve(ca), Latency::Curve(cb)) => curve_change(ca, cb),
        (Latency::Steps(sa), Latency::Steps(sb)) => sa
            .to_flat()
            .iter()
            .zip(sb.to_flat())
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max),
        _ => f64::INFINITY,
    };
    latency.max(sup_norm(&(&a.gamma - &b.gamma)))
}

fn initial_state(
    data: &[SubjectRecord],
    mode: FitMode,
    opts: &FitOptions,
) -> Result<(ParameterState, bool)> {
    let delta: Vec<f64> = data.iter().map(SubjectRecord::delta).collect();
    let g = gamma_update(data, &delta, None, opts)?;
    let ones = vec![1.0; data.len()];
    let latency = match mode {
        FitMode::Nonparametric => Latency::Curve(fit_aalen_with(data, opts.condition)?.curve),
        FitMode::LocallyConstant { windows, horizon } => {
            let part = Partition::new(horizon, windows)?;
            Latency::Steps(beta_update_with_weights(data, &ones, &part, opts)?.beta)
        }
    };
    Ok((
        ParameterState {
            latency,
            gamma: g.gamma,
        },
        g.separation,
    ))
}

/// Alternates the incidence and latency updates until the parameter change drops below the tolerance.
pub fn fit_em(
    data: &[SubjectRecord],
    mode: FitMode,
    init: Option<ParameterState>,
    opts: &FitOptions,
) -> Result<FitReport> {
    opts.validate()?;
    let (p, q) = dimensions(data)?;
    if data.len() < p.max(q) {
        return Err(Error::Config(format!(
            "need at least max(p, q) = {} subjects, got {}",
            p.max(q),
            data.len()
        )));
    }
    let (mut state, mut separation) = match init {
        Some(s) => (s, false),
        None => initial_state(data, mode, opts)?,
    };
    if state.p() != p || state.q() != q {
        return Err(Error::Config("initial state dimensions do not match the data".into()));
    }
    let mut trace = Vec::new();
    let mut converged = false;
    let mut last: Option<EmStep> = None;
    let mut newton_steps = 0;
    while trace.len() < opts.max_iterations {
        let step = em_step(data, mode, &state, opts)?;
        let change = state_change(&state, &step.state);
        trace.push(change);
        separation |= step.separation;
        if change < opts.tolerance || !opts.accelerate || trace.len() >= opts.max_iterations {
            state = step.state.clone();
            last = Some(step);
            converged = change < opts.tolerance;
            if converged {
                break;
            }
            continue;
        }
        let second = em_step(data, mode, &step.state, opts)?;
        let change2 = state_change(&step.state, &second.state);
        trace.push(change2);
        separation |= second.separation;
        if change2 < opts.tolerance || trace.len() >= opts.max_iterations {
            converged = change2 < opts.tolerance;
            state = second.state.clone();
            last = Some(second);
            if converged {
                break;
            }
            continue;
        }
        let fallback = second;
        let jumped = extrapolate(&state, &step.state, &fallback.state)
            .and_then(|s| em_step(data, mode, &s, opts).ok().map(|t| (s, t)));
        match jumped {
            Some((from, to)) => {
                let change3 = state_change(&from, &to.state);
                // keep the extrapolation only if it does not lose ground
                if change3.is_finite() && change3 <= change {
                    trace.push(change3);
                    separation |= to.separation;
                    converged = change3 < opts.tolerance;
                    state = to.state.clone();
                    last = Some(to);
                } else {
                    state = fallback.state.clone();
                    last = Some(fallback);
                }
            }
            None => {
                state = fallback.state.clone();
                last = Some(fallback);
            }
        }
        if converged {
            break;
        }
        if opts.newton_refine && trace.last().is_some_and(|&c| c < opts.refine_below) {
            for _ in 0..NEWTON_BURST {
                match newton_step(data, &state) {
                    Some((better, residual)) => {
                        state = better;
                        newton_steps += 1;
                        if residual < NEWTON_TARGET {
                            break;
                        }
                    }
                    None => break,
                }
            }
        }
    }
    let last = last.expect("at least one iteration");
    let residual = state.as_theta().map(|th| sup_norm(&psi_system(data, &th)));
    Ok(FitReport {
        iterations: trace.len(),
        state,
        converged,
        residual,
        truncation: last.truncation,
        trace,
        separation,
        degenerate_windows: last.degenerate,
        newton_steps,
        latency_fit: last.latency_fit,
    })
}

const NEWTON_BURST: usize = 8;
const NEWTON_TARGET: f64 = 1e-13;

/// Newton step `theta - J^{-1} Psi_n(theta)`, halved until `||Psi_n||_inf` decreases.
fn newton_step(data: &[SubjectRecord], state: &ParameterState) -> Option<(ParameterState, f64)> {
    let theta = state.as_theta()?;
    let psi = psi_system(data, &theta);
    let start = sup_norm(&psi);
    let jac = psi_jacobian(data, &theta);
    let step = jac.lu().solve(&psi)?;
    let base = theta.to_vector();
    let part = *theta.partition();
    let mut scale = 1.0;
    for _ in 0..12 {
        let cand = Theta::from_vector(part, theta.q(), theta.p(), &(&base - &step * scale)).ok()?;
        let value = sup_norm(&psi_system(data, &cand));
        if value.is_finite() && value < start {
            return Some((cand.into(), value));
        }
        scale *= 0.5;
    }
    None
}

/// One application of the EM map.
struct EmStep {
    state: ParameterState,
    separation: bool,
    truncation: Option<f64>,
    degenerate: Vec<usize>,
    latency_fit: Option<AalenFit>,
}

fn em_step(
    data: &[SubjectRecord],
    mode: FitMode,
    state: &ParameterState,
    opts: &FitOptions,
) -> Result<EmStep> {
    let u = posterior_weights(data, state);
    let g = gamma_update(data, &u, Some(&state.gamma), opts)?;
    let mut step = EmStep {
        state: ParameterState {
            latency: state.latency.clone(),
            gamma: g.gamma,
        },
        separation: g.separation,
        truncation: None,
        degenerate: Vec::new(),
        latency_fit: None,
    };
    match mode {
        FitMode::Nonparametric => {
            let fit = weighted_aalen(data, &u, opts.condition)?;
            step.truncation = fit.truncation;
            step.state.latency = Latency::Curve(fit.curve.clone());
            step.latency_fit = Some(fit);
        }
        FitMode::LocallyConstant { windows, horizon } => {
            let part = Partition::new(horizon, windows)?;
            let upd = beta_update_with_weights(data, &u, &part, opts)?;
            step.degenerate = upd.degenerate;
            step.state.latency = Latency::Steps(upd.beta);
        }
    }
    Ok(step)
}

/// Parameter as a flat vector, latency first.
fn flatten(state: &ParameterState) -> Vec<f64> {
    let mut v: Vec<f64> = match &state.latency {
        Latency::Curve(c) => c.values().iter().flat_map(|b| b.iter().copied()).collect(),
        Latency::Steps(s) => s.to_flat(),
    };
    v.extend(state.gamma.iter().copied());
    v
}

fn unflatten(template: &ParameterState, v: &[f64]) -> Option<ParameterState> {
    let p = template.p();
    let (lat, gamma) = v.split_at(v.len() - p);
    let latency = match &template.latency {
        Latency::Curve(c) => {
            let q = c.dim();
            let values = lat.chunks(q).map(DVector::from_column_slice).collect();
            Latency::Curve(
                CumulativeCurve::new(q, c.knots().to_vec(), values, c.interpolation()).ok()?,
            )
        }
        Latency::Steps(s) => {
            Latency::Steps(StepCoefficients::from_flat(*s.partition(), s.q(), lat).ok()?)
        }
    };
    Some(ParameterState {
        latency,
        gamma: DVector::from_column_slice(gamma),
    })
}

fn same_layout(a: &ParameterState, b: &ParameterState) -> bool {
    match (&a.latency, &b.latency) {
        (Latency::Curve(x), Latency::Curve(y)) => x.knots() == y.knots(),
        (Latency::Steps(_), Latency::Steps(_)) => true,
        _ => false,
    }
}

/// Squared extrapolation `x0 - 2 a r + a^2 v` of three successive iterates,
/// with `r = x1 - x0`, `v = x2 - 2 x1 + x0` and step `a = -|r| / |v|`, capped at -1.
fn extrapolate(
    s0: &ParameterState,
    s1: &ParameterState,
    s2: &ParameterState,
) -> Option<ParameterState> {
    if !same_layout(s0, s1) || !same_layout(s1, s2) {
        return None;
    }
    let (x0, x1, x2) = (flatten(s0), flatten(s1), flatten(s2));
    if x0.len() != x1.len() || x1.len() != x2.len() {
        return None;
    }
    let r: Vec<f64> = x1.iter().zip(&x0).map(|(a, b)| a - b).collect();
    let v: Vec<f64> = (0..x0.len()).map(|i| x2[i] - 2.0 * x1[i] + x0[i]).collect();
    let (nr, nv) = (
        r.iter().map(|a| a * a).sum::<f64>().sqrt(),
        v.iter().map(|a| a * a).sum::<f64>().sqrt(),
    );
    if !(nv > 0.0) || !nr.is_finite() {
        return None;
    }
    let alpha = (-nr / nv).min(-1.0);
    let x: Vec<f64> = (0..x0.len())
        .map(|i| x0[i] - 2.0 * alpha * r[i] + alpha * alpha * v[i])
        .collect();
    if x.iter().any(|a| !a.is_finite()) {
        return None;
    }
    unflatten(s2, &x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aalen::fit_aalen;
    use crate::model::{CovariatePair, Interpolation};

    fn rec(t: f64, d: bool, x: &[f64], z: &[f64]) -> SubjectRecord {
        SubjectRecord::new(t, d, CovariatePair::from_columns(x, z).unwrap()).unwrap()
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn toy(n: usize) -> Vec<SubjectRecord> {
        (0..n)
            .map(|i| {
                let f = i as f64;
                let t = 0.05 + ((i * 29) % 97) as f64 / 50.0;
                rec(
                    t.min(2.0),
                    i % 3 != 1,
                    &[(f * 0.37).sin()],
                    &[(f * 0.71).cos() * 0.5],
                )
            })
            .collect()
    }

    #[test]
    fn posterior_weight_cases() {
        let curve = CumulativeCurve::new(1, vec![0.5], vec![dv(&[2f64.ln()])], Interpolation::StepRightContinuous)
            .unwrap();
        let state = ParameterState {
            latency: Latency::Curve(curve),
            gamma: dv(&[0.0]),
        };
        assert_eq!(posterior_weight(&rec(1.0, true, &[], &[]), &state), 1.0);
        assert_eq!(posterior_weight(&rec(0.2, false, &[], &[]), &state), 0.5);
        let w = posterior_weight(&rec(1.0, false, &[], &[]), &state);
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gamma_update_closed_forms() {
        let data: Vec<_> = (0..10).map(|i| rec(1.0 + i as f64 * 0.1, true, &[], &[])).collect();
        let opts = FitOptions::default();
        let half = vec![0.5; 10];
        assert!(gamma_update(&data, &half, None, &opts).unwrap().gamma[0].abs() < 1e-12);
        let u: Vec<f64> = (0..10).map(|i| if i < 7 { 1.0 } else { 0.0 }).collect();
        let g = gamma_update(&data, &u, None, &opts).unwrap();
        assert!((g.gamma[0] - (0.7f64 / 0.3).ln()).abs() < 1e-10);
        assert!(!g.separation);
    }

    #[test]
    fn gamma_update_zeroes_the_score() {
        let data = toy(60);
        let u: Vec<f64> = (0..60).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let g = gamma_update(&data, &u, None, &FitOptions::default()).unwrap();
        let mut score = DVector::zeros(2);
        for (r, ui) in data.iter().zip(&u) {
            let x = r.covariates.x();
            score.axpy(ui - logistic(x.dot(&g.gamma)), x, 1.0);
        }
        assert!(sup_norm(&score) / 60.0 < 1e-8);
    }

    #[test]
    fn gamma_update_flags_separation() {
        let data: Vec<_> = (0..10).map(|i| rec(1.0 + i as f64 * 0.1, true, &[], &[])).collect();
        let g = gamma_update(&data, &[1.0; 10], None, &FitOptions::default()).unwrap();
        assert!(g.separation);
        assert!(g.gamma[0].is_finite() && g.gamma[0] > 10.0);
    }

    #[test]
    fn weight_one_reduction_is_bitwise() {
        let data: Vec<_> = toy(40).into_iter().map(|r| SubjectRecord { event: true, ..r }).collect();
        let state = ParameterState {
            latency: Latency::Curve(CumulativeCurve::zero(2)),
            gamma: dv(&[0.3, -0.2]),
        };
        let a = b_update_nonparametric(&data, &state, &FitOptions::default()).unwrap();
        let b = fit_aalen(&data).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_subject_updates() {
        let one = vec![rec(0.8, true, &[], &[])];
        let state = ParameterState {
            latency: Latency::Curve(CumulativeCurve::zero(1)),
            gamma: dv(&[0.0]),
        };
        let fit = b_update_nonparametric(&one, &state, &FitOptions::default()).unwrap();
        assert_eq!(fit.curve.evaluate(0.8)[0], 1.0);
        let part = Partition::new(1.0, 1).unwrap();
        let upd = beta_update_with_weights(&one, &[1.0], &part, &FitOptions::default()).unwrap();
        assert!((upd.beta.window(0)[0] - 1.0 / 0.8).abs() < 1e-15);
    }

    #[test]
    fn empty_window_is_zero_and_flagged() {
        let data = vec![rec(0.3, true, &[], &[]), rec(0.4, false, &[], &[])];
        let part = Partition::new(2.0, 4).unwrap();
        let upd = beta_update_with_weights(&data, &[1.0, 1.0], &part, &FitOptions::default()).unwrap();
        assert_eq!(upd.degenerate, vec![1, 2, 3]);
        assert_eq!(upd.beta.window(2)[0], 0.0);
    }

    fn random_theta(k: usize) -> Theta {
        let part = Partition::new(2.0, k).unwrap();
        let values = (0..k).map(|j| dv(&[0.4 + 0.05 * j as f64, 0.1 - 0.02 * j as f64])).collect();
        Theta {
            beta: StepCoefficients::new(part, values).unwrap(),
            gamma: dv(&[0.4, -0.7]),
        }
    }

    #[test]
    fn psi_identities() {
        let data = toy(80);
        let theta = random_theta(5);
        let psi = psi_system(&data, &theta);
        let state: ParameterState = theta.clone().into();
        let ups = upsilon_system(&data, &theta, &posterior_weights(&data, &state));
        assert!(sup_norm(&(&psi - &ups)) < 1e-12);
        let mart = psi_martingale_form(&data, &theta);
        assert!(sup_norm(&(&psi - &mart)) < 1e-10, "{}", sup_norm(&(&psi - &mart)));
        assert_eq!(psi_martingale_form(&[], &theta), DVector::zeros(theta.dim()));
    }

    #[test]
    fn single_subject_hand_case() {
        // K = 1, p = q = 1, censored at T = 0.5 on [0, 1]
        let data = vec![rec(0.5, false, &[], &[])];
        let part = Partition::new(1.0, 1).unwrap();
        let theta = Theta {
            beta: StepCoefficients::constant(part, dv(&[2.0])),
            gamma: dv(&[0.3]),
        };
        let w = logistic(0.3 - 1.0);
        let expected = [-0.5 * w * 2.0, w - logistic(0.3)];
        let psi = psi_system(&data, &theta);
        let mart = psi_martingale_form(&data, &theta);
        for d in 0..2 {
            assert!((psi[d] - expected[d]).abs() < 1e-15);
            assert!((mart[d] - expected[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn upsilon_with_zero_weights() {
        let data = toy(30);
        let theta = random_theta(3);
        let ups = upsilon_system(&data, &theta, &vec![0.0; 30]);
        let part = theta.partition();
        let k = part.count();
        let mut expected = DVector::zeros(theta.dim());
        for r in &data {
            for j in 0..k {
                let a = r.delta() * part.indicator(r.time, j) / 30.0;
                expected.rows_mut(j * 2, 2).axpy(a, r.covariates.z(), 1.0);
            }
            let pi = logistic(r.covariates.x().dot(&theta.gamma));
            expected.rows_mut(2 * k, 2).axpy(-pi / 30.0, r.covariates.x(), 1.0);
        }
        assert!(sup_norm(&(ups - expected)) < 1e-15);
    }

    #[test]
    fn em_locally_constant_converges_to_a_root() {
        let cfg = crate::simulate::ScenarioConfig {
            n: 400,
            ..crate::simulate::desk_scenario(8)
        };
        let data = crate::simulate::draw_dataset(&cfg).unwrap().records;
        let opts = FitOptions::default();
        let mode = FitMode::LocallyConstant {
            windows: 4,
            horizon: 2.0,
        };
        let rep = fit_em(&data, mode, None, &opts).unwrap();
        assert!(rep.converged, "trace tail {:?}", &rep.trace[rep.trace.len().saturating_sub(3)..]);
        assert!(rep.residual.unwrap() <= 100.0 * opts.tolerance);
        let again = fit_em(&data, mode, None, &opts).unwrap();
        assert_eq!(rep, again);
    }
}
