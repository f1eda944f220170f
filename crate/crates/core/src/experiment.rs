//! Monte Carlo replication of simulate-then-fit cycles.
//!
//! Replication `r` draws its data from `replication_seed(seed, r)`, so every
//! output depends only on the configuration and never on the thread count.
//! Aggregates use the replications with status `ok`; the others are counted.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::{ExperimentSection, FitSection, ModeName};
use crate::error::{Error, Result};
use crate::estimates::Estimates;
use crate::fit::fit_em;
use crate::io::real;
use crate::simulate::{draw_dataset_with, replication_seed, PositivityPolicy, ScenarioConfig};

pub const STATUS_OK: &str = "ok";
pub const STATUS_NOT_CONVERGED: &str = "not_converged";

/// One simulate-then-fit cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub rep: usize,
    pub seed: u64,
    /// `ok`, `not_converged`, or the kind of the error that stopped the cycle.
    pub status: String,
    pub iterations: usize,
    /// `||Psi_n||_inf` in locally constant mode, `NaN` otherwise.
    pub residual: f64,
    pub positivity_violations: usize,
    pub events: usize,
    pub gamma: Vec<f64>,
    pub gamma_se: Vec<f64>,
    /// `B_hat_l(t)` indexed `[time][l]` over the report times.
    pub b: Vec<Vec<f64>>,
    pub b_se: Vec<Vec<f64>>,
    /// `B_hat_l(t)` indexed `[grid point][l]`.
    pub curve: Vec<Vec<f64>>,
    pub seconds: f64,
}

impl Replication {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }

    fn has_estimates(&self) -> bool {
        !self.gamma.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSummary {
    pub name: String,
    pub truth: f64,
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub bias: f64,
    /// `sd / sqrt(count)`
    pub mc_se: f64,
    pub mean_se: f64,
    /// Fraction of pointwise intervals `estimate +- z se` covering the truth.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub name: String,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityCurve {
    pub name: String,
    pub bandwidth: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub scenario: ScenarioConfig,
    pub fit: FitSection,
    pub experiment: ExperimentSection,
    pub replications: Vec<Replication>,
    pub parameters: Vec<ParameterSummary>,
    pub histograms: Vec<Histogram>,
    pub densities: Vec<DensityCurve>,
    pub grid: Vec<f64>,
    /// True `B(t)` on `grid`, indexed `[grid point][l]`.
    pub truth_curve: Vec<Vec<f64>>,
}

impl ExperimentSummary {
    pub fn count(&self, status: &str) -> usize {
        self.replications.iter().filter(|r| r.status == status).count()
    }

    pub fn failures(&self) -> usize {
        self.replications.len() - self.count(STATUS_OK)
    }

    pub fn positivity_violations(&self) -> usize {
        self.replications.iter().map(|r| r.positivity_violations).sum()
    }

    pub fn parameter(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

pub fn gamma_name(j: usize) -> String {
    format!("gamma{j}")
}

pub fn b_name(l: usize, t: f64) -> String {
    format!("B{l}@{}", real(t))
}

fn equispaced(horizon: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|k| horizon * k as f64 / (points - 1) as f64)
        .collect()
}

fn failed(rep: usize, seed: u64, err: &Error, seconds: f64) -> Replication {
    let positivity_violations = usize::from(matches!(err, Error::PositivityViolation { .. }));
    Replication {
        rep,
        seed,
        status: err.kind().to_string(),
        iterations: 0,
        residual: f64::NAN,
        positivity_violations,
        events: 0,
        gamma: Vec::new(),
        gamma_se: Vec::new(),
        b: Vec::new(),
        b_se: Vec::new(),
        curve: Vec::new(),
        seconds,
    }
}

fn run_one(
    rep: usize,
    scenario: &ScenarioConfig,
    fit: &FitSection,
    exp: &ExperimentSection,
    grid: &[f64],
) -> Replication {
    let start = Instant::now();
    let seed = replication_seed(exp.seed, rep as u64);
    let cfg = ScenarioConfig {
        seed,
        ..scenario.clone()
    };
    let policy = if exp.allow_nonpositive_hazard {
        PositivityPolicy::Clip
    } else {
        PositivityPolicy::Reject
    };
    let outcome = draw_dataset_with(&cfg, policy).and_then(|ds| {
        let report = fit_em(&ds.records, fit.fit_mode(cfg.horizon), None, &fit.options())?;
        let est = Estimates::from_fit(&ds.records, &report)?;
        Ok((ds, report, est))
    });
    let (ds, report, est) = match outcome {
        Ok(v) => v,
        Err(e) => return failed(rep, seed, &e, start.elapsed().as_secs_f64()),
    };
    let status = if !report.converged {
        STATUS_NOT_CONVERGED.to_string()
    } else if est.singular_jacobian().is_some() {
        "singular_jacobian".to_string()
    } else {
        STATUS_OK.to_string()
    };
    let column = |v: nalgebra::DVector<f64>| v.iter().copied().collect::<Vec<f64>>();
    Replication {
        rep,
        seed,
        status,
        iterations: report.iterations,
        residual: report.residual.unwrap_or(f64::NAN),
        positivity_violations: ds.positivity_violations(),
        events: ds.records.iter().filter(|r| r.event).count(),
        gamma: column(est.gamma.clone()),
        gamma_se: column(est.gamma_se.clone()),
        b: exp.report_times.iter().map(|&t| column(est.cumulative(t))).collect(),
        b_se: exp.report_times.iter().map(|&t| column(est.cumulative_se(t))).collect(),
        curve: grid.iter().map(|&t| column(est.cumulative(t))).collect(),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs all replications on a pool of `threads` workers (all cores when `None`).
pub fn run_experiment(
    scenario: &ScenarioConfig,
    fit: &FitSection,
    exp: &ExperimentSection,
    threads: Option<usize>,
) -> Result<ExperimentSummary> {
    scenario.validate()?;
    fit.validate()?;
    exp.validate()?;
    let grid = equispaced(scenario.horizon, exp.grid_points);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot build the worker pool: {e}")))?;
    let replications: Vec<Replication> = pool.install(|| {
        (0..exp.reps)
            .into_par_iter()
            .map(|rep| run_one(rep, scenario, fit, exp, &grid))
            .collect()
    });
    Ok(summarize_replications(scenario, fit, exp, replications, grid))
}

/// Aggregates per-replication rows; also used to re-derive the summary from a saved file.
pub fn summarize_replications(
    scenario: &ScenarioConfig,
    fit: &FitSection,
    exp: &ExperimentSection,
    replications: Vec<Replication>,
    grid: Vec<f64>,
) -> ExperimentSummary {
    let ok: Vec<&Replication> = replications.iter().filter(|r| r.is_ok()).collect();
    let z = Normal::standard().inverse_cdf(0.5 + exp.level / 2.0);
    let mut parameters = Vec::new();
    for (j, &truth) in scenario.gamma.iter().enumerate() {
        let est: Vec<f64> = ok.iter().map(|r| r.gamma[j]).collect();
        let se: Vec<f64> = ok.iter().map(|r| r.gamma_se[j]).collect();
        parameters.push(parameter_summary(gamma_name(j), truth, &est, &se, z));
    }
    for (k, &t) in exp.report_times.iter().enumerate() {
        let truth = scenario.true_cumulative(t);
        for l in 0..scenario.q() {
            let est: Vec<f64> = ok.iter().map(|r| r.b[k][l]).collect();
            let se: Vec<f64> = ok.iter().map(|r| r.b_se[k][l]).collect();
            parameters.push(parameter_summary(b_name(l, t), truth[l], &est, &se, z));
        }
    }
    let mut histograms = Vec::new();
    let mut densities = Vec::new();
    for j in 0..scenario.gamma.len() {
        let est: Vec<f64> = ok.iter().map(|r| r.gamma[j]).collect();
        if let Some(h) = freedman_diaconis(gamma_name(j), &est) {
            histograms.push(h);
        }
        if let Some(d) = gaussian_kde(gamma_name(j), &est, 200) {
            densities.push(d);
        }
    }
    let truth_curve = grid
        .iter()
        .map(|&t| scenario.true_cumulative(t).iter().copied().collect())
        .collect();
    ExperimentSummary {
        scenario: scenario.clone(),
        fit: fit.clone(),
        experiment: exp.clone(),
        replications,
        parameters,
        histograms,
        densities,
        grid,
        truth_curve,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation with the `m - 1` divisor.
fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn parameter_summary(name: String, truth: f64, est: &[f64], se: &[f64], z: f64) -> ParameterSummary {
    let count = est.len();
    let m = mean(est);
    let sd = sample_sd(est);
    let covered = est
        .iter()
        .zip(se)
        .filter(|(e, s)| (*e - truth).abs() <= z * *s)
        .count();
    ParameterSummary {
        name,
        truth,
        count,
        mean: m,
        sd,
        bias: m - truth,
        mc_se: sd / (count as f64).sqrt(),
        mean_se: mean(se),
        coverage: if truth.is_nan() {
            f64::NAN
        } else {
            covered as f64 / count as f64
        },
    }
}

/// Linear-interpolation sample quantile of sorted data.
fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let h = prob * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_finite(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Histogram with Freedman-Diaconis bin width `2 IQR m^{-1/3}`, at most 200 bins.
pub fn freedman_diaconis(name: String, values: &[f64]) -> Option<Histogram> {
    let v = sorted_finite(values);
    if v.len() < 2 {
        return None;
    }
    let (lo, hi) = (v[0], v[v.len() - 1]);
    let iqr = quantile(&v, 0.75) - quantile(&v, 0.25);
    let width = 2.0 * iqr / (v.len() as f64).cbrt();
    let bins = if width > 0.0 && hi > lo {
        (((hi - lo) / width).ceil() as usize).clamp(1, 200)
    } else {
        1
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|k| lo + span * k as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    for x in &v {
        let k = (((x - lo) / span) * bins as f64).floor() as usize;
        counts[k.min(bins - 1)] += 1;
    }
    Some(Histogram { name, edges, counts })
}

/// Gaussian kernel density with Silverman's bandwidth on `points` grid points.
pub fn gaussian_kde(name: String, values: &[f64], points: usize) -> Option<DensityCurve> {
    let v = sorted_finite(values);
    if v.len() < 2 {
        return None;
    }
    let m = v.len() as f64;
    let spread = sample_sd(&v).min((quantile(&v, 0.75) - quantile(&v, 0.25)) / 1.34);
    let spread = if spread > 0.0 { spread } else { sample_sd(&v) };
    if !(spread > 0.0) {
        return None;
    }
    let bandwidth = 0.9 * spread * m.powf(-0.2);
    let (lo, hi) = (v[0] - 3.0 * bandwidth, v[v.len() - 1] + 3.0 * bandwidth);
    let x: Vec<f64> = (0..points)
        .map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64)
        .collect();
    let norm = 1.0 / (m * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let density = x
        .iter()
        .map(|&g| {
            norm * v
                .iter()
                .map(|&s| (-0.5 * ((g - s) / bandwidth).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    Some(DensityCurve {
        name,
        bandwidth,
        x,
        density,
    })
}

fn replication_header(p: usize, q: usize, times: &[f64]) -> Vec<String> {
    let mut h: Vec<String> = [
        "rep",
        "seed",
        "status",
        "iterations",
        "residual",
        "positivity_violations",
        "events",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..p).map(gamma_name));
    h.extend((0..p).map(|j| format!("se_{}", gamma_name(j))));
    for &t in times {
        h.extend((0..q).map(|l| b_name(l, t)));
    }
    for &t in times {
        h.extend((0..q).map(|l| format!("se_{}", b_name(l, t))));
    }
    h
}

fn csv_file(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_replications(summary: &ExperimentSummary, dir: &Path) -> Result<()> {
    let (p, q) = (summary.scenario.p(), summary.scenario.q());
    let times = &summary.experiment.report_times;
    let mut w = csv_file(dir, "replications.csv")?;
    writeln!(w, "{}", replication_header(p, q, times).join(","))?;
    for r in &summary.replications {
        let mut cells = vec![
            r.rep.to_string(),
            r.seed.to_string(),
            r.status.clone(),
            r.iterations.to_string(),
            real(r.residual),
            r.positivity_violations.to_string(),
            r.events.to_string(),
        ];
        let nan = |k: usize| vec![f64::NAN; k];
        let flat = |rows: &[Vec<f64>]| -> Vec<f64> {
            if rows.is_empty() {
                nan(q * times.len())
            } else {
                rows.concat()
            }
        };
        let gamma = if r.has_estimates() { r.gamma.clone() } else { nan(p) };
        let gamma_se = if r.has_estimates() { r.gamma_se.clone() } else { nan(p) };
        cells.extend(
            gamma
                .iter()
                .chain(&gamma_se)
                .chain(&flat(&r.b))
                .chain(&flat(&r.b_se))
                .map(|v| real(*v)),
        );
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn write_summary(summary: &ExperimentSummary, dir: &Path) -> Result<()> {
    let mut w = csv_file(dir, "summary.csv")?;
    writeln!(w, "parameter,truth,count,mean,sd,bias,mc_se,mean_se,coverage")?;
    for s in &summary.parameters {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.name,
            real(s.truth),
            s.count,
            real(s.mean),
            real(s.sd),
            real(s.bias),
            real(s.mc_se),
            real(s.mean_se),
            real(s.coverage)
        )?;
    }
    w.flush()?;
    Ok(())
}

fn write_plot_data(summary: &ExperimentSummary, dir: &Path) -> Result<()> {
    let mut w = csv_file(dir, "hist_gamma.csv")?;
    writeln!(w, "parameter,bin,lower,upper,count,density")?;
    for h in &summary.histograms {
        let total: usize = h.counts.iter().sum();
        for (k, c) in h.counts.iter().enumerate() {
            let (lo, hi) = (h.edges[k], h.edges[k + 1]);
            let density = *c as f64 / (total as f64 * (hi - lo));
            writeln!(w, "{},{k},{},{},{c},{}", h.name, real(lo), real(hi), real(density))?;
        }
    }
    w.flush()?;

    let mut w = csv_file(dir, "density_gamma.csv")?;
    writeln!(w, "parameter,x,density")?;
    for d in &summary.densities {
        for (x, f) in d.x.iter().zip(&d.density) {
            writeln!(w, "{},{},{}", d.name, real(*x), real(*f))?;
        }
    }
    w.flush()?;

    let q = summary.scenario.q();
    let mut w = csv_file(dir, "curves.csv")?;
    let mut head = vec!["rep".to_string(), "status".to_string(), "time".to_string()];
    head.extend((0..q).map(|l| format!("B{l}")));
    head.extend((0..q).map(|l| format!("true_B{l}")));
    writeln!(w, "{}", head.join(","))?;
    for r in summary.replications.iter().filter(|r| r.has_estimates()) {
        for ((t, est), truth) in summary.grid.iter().zip(&r.curve).zip(&summary.truth_curve) {
            let vals: Vec<String> = est.iter().chain(truth).map(|v| real(*v)).collect();
            writeln!(w, "{},{},{},{}", r.rep, r.status, real(*t), vals.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_report_file(summary: &ExperimentSummary, dir: &Path) -> Result<()> {
    let e = &summary.experiment;
    let mode = match summary.fit.mode {
        ModeName::Np => "np",
        ModeName::Lc => "lc",
    };
    let mut kinds: Vec<&str> = summary.replications.iter().map(|r| r.status.as_str()).collect();
    kinds.sort_unstable();
    kinds.dedup();
    let mut entries = vec![
        ("reps".to_string(), e.reps.to_string()),
        ("master_seed".to_string(), e.seed.to_string()),
        ("n".to_string(), summary.scenario.n.to_string()),
        ("horizon".to_string(), real(summary.scenario.horizon)),
        ("mode".to_string(), format!("\"{mode}\"")),
        ("windows".to_string(), summary.fit.windows.to_string()),
        ("tolerance".to_string(), real(summary.fit.tolerance)),
        ("max_iterations".to_string(), summary.fit.max_iterations.to_string()),
        ("allow_nonpositive_hazard".to_string(), e.allow_nonpositive_hazard.to_string()),
        ("level".to_string(), real(e.level)),
        ("converged".to_string(), summary.count(STATUS_OK).to_string()),
        ("failures".to_string(), summary.failures().to_string()),
        (
            "positivity_violations".to_string(),
            summary.positivity_violations().to_string(),
        ),
        (
            "reps_with_positivity_violations".to_string(),
            summary
                .replications
                .iter()
                .filter(|r| r.positivity_violations > 0)
                .count()
                .to_string(),
        ),
    ];
    for k in kinds {
        entries.push((format!("status.{k}"), summary.count(k).to_string()));
    }
    let ok: Vec<&Replication> = summary.replications.iter().filter(|r| r.is_ok()).collect();
    if !ok.is_empty() {
        let its: Vec<f64> = ok.iter().map(|r| r.iterations as f64).collect();
        entries.push(("mean_iterations".to_string(), real(mean(&its))));
        entries.push((
            "max_iterations_used".to_string(),
            ok.iter().map(|r| r.iterations).max().unwrap_or(0).to_string(),
        ));
    }
    crate::io::write_report(&dir.join("report.txt"), &entries)
}

/// Wall-clock statistics; kept out of the deterministic files.
pub fn write_timing(summary: &ExperimentSummary, dir: &Path) -> Result<()> {
    let secs: Vec<f64> = summary.replications.iter().map(|r| r.seconds).collect();
    let sorted = sorted_finite(&secs);
    let mut entries = vec![("total_rep_seconds".to_string(), real(secs.iter().sum()))];
    if !sorted.is_empty() {
        entries.push(("mean_rep_seconds".to_string(), real(mean(&sorted))));
        entries.push(("median_rep_seconds".to_string(), real(quantile(&sorted, 0.5))));
        entries.push(("max_rep_seconds".to_string(), real(sorted[sorted.len() - 1])));
    }
    crate::io::write_report(&dir.join("timing.txt"), &entries)
}

/// Writes `replications.csv`, `summary.csv`, `report.txt`, `hist_gamma.csv`,
/// `density_gamma.csv` and `curves.csv` into `dir`.
pub fn write_outputs(summary: &ExperimentSummary, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_replications(summary, dir)?;
    write_summary(summary, dir)?;
    write_plot_data(summary, dir)?;
    write_report_file(summary, dir)
}

/// Reads `replications.csv` back; curves and timings are not stored there.
pub fn read_replications(path: &Path, p: usize, q: usize, times: &[f64]) -> Result<Vec<Replication>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let expected = replication_header(p, q, times);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if header != expected {
        return Err(Error::Parse {
            line: 1,
            message: "unexpected replications header".into(),
        });
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |k: usize| Error::Parse {
            line,
            message: format!("column {}: cannot parse {:?}", expected[k], &row[k]),
        };
        let int = |k: usize| row[k].parse::<u64>().map_err(|_| bad(k));
        let num = |k: usize| row[k].parse::<f64>().map_err(|_| bad(k));
        let nt = times.len();
        let reals: Vec<f64> = (7..expected.len()).map(num).collect::<Result<_>>()?;
        let (gamma, rest) = reals.split_at(p);
        let (gamma_se, rest) = rest.split_at(p);
        let (b, b_se) = rest.split_at(q * nt);
        let status = row[2].to_string();
        let has = gamma.iter().any(|v| !v.is_nan());
        let chunks = |v: &[f64]| v.chunks(q).map(<[f64]>::to_vec).collect::<Vec<_>>();
        out.push(Replication {
            rep: int(0)? as usize,
            seed: int(1)?,
            status,
            iterations: int(3)? as usize,
            residual: num(4)?,
            positivity_violations: int(5)? as usize,
            events: int(6)? as usize,
            gamma: if has { gamma.to_vec() } else { Vec::new() },
            gamma_se: if has { gamma_se.to_vec() } else { Vec::new() },
            b: if has { chunks(b) } else { Vec::new() },
            b_se: if has { chunks(b_se) } else { Vec::new() },
            curve: Vec::new(),
            seconds: f64::NAN,
        });
    }
    Ok(out)
}
