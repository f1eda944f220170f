use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aalen_cure::aalen::fit_aalen;
use aalen_cure::config::{load_config, FitSection, ModeName};
use aalen_cure::estimates::Estimates;
use aalen_cure::experiment::{run_experiment, write_outputs, write_timing, STATUS_OK};
use aalen_cure::fit::{fit_em, FitReport};
use aalen_cure::io::{load_dataset, real, save_dataset, write_curve, write_gamma, write_report, write_variance};
use aalen_cure::simulate::{draw_dataset_with, PositivityPolicy};
use aalen_cure::{Error, Result};

const EXIT_CODES: &str = "\
Exit codes:
  0   success
  1   internal error
  2   usage error (bad command line)
  3   file input/output error
  4   invalid configuration or dataset contents
  5   malformed configuration or dataset file (message names the line)
  6   nonpositive hazard in the scenario (see --allow-nonpositive-hazard)
  7   singular at-risk design matrix
  8   EM did not converge (fit outputs are still written)
  9   singular estimating-equation Jacobian (standard errors are NaN)
  10  cumulative hazard not monotone during simulation";

#[derive(Parser)]
#[command(
    name = "aalen-cure",
    version,
    about = "Mixture cure models with an additive (Aalen) latency hazard",
    after_help = EXIT_CODES
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one dataset from the [scenario] table of a config file.
    #[command(after_help = EXIT_CODES)]
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output dataset CSV.
        #[arg(long)]
        out: PathBuf,
        /// Overrides scenario.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Clip a nonpositive hazard at zero instead of failing.
        #[arg(long)]
        allow_nonpositive_hazard: bool,
    },
    /// Fit the cure model to a dataset CSV.
    #[command(after_help = EXIT_CODES)]
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Output prefix; writes PREFIX_curve.csv, PREFIX_gamma.csv, PREFIX_report.txt.
        #[arg(long)]
        out: PathBuf,
        /// np (nonparametric) or lc (locally constant); overrides fit.mode.
        #[arg(long)]
        mode: Option<ModeName>,
        /// Number of windows in lc mode; overrides fit.windows.
        #[arg(long)]
        k: Option<usize>,
        /// Optional config whose [fit] table sets the remaining options.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Classical Aalen estimator without a cure fraction.
    #[command(after_help = EXIT_CODES)]
    Aalen {
        #[arg(long)]
        data: PathBuf,
        /// Output prefix; writes PREFIX_curve.csv and PREFIX_variance.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo replication of simulate-then-fit cycles.
    #[command(after_help = EXIT_CODES)]
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides experiment.reps.
        #[arg(long)]
        reps: Option<usize>,
        /// Worker threads (default: all cores). Outputs do not depend on it.
        #[arg(long)]
        threads: Option<usize>,
        /// Overrides experiment.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<ModeName>,
        #[arg(long)]
        k: Option<usize>,
        /// Clip a nonpositive hazard at zero and count the affected subjects.
        #[arg(long)]
        allow_nonpositive_hazard: bool,
        /// Also write wall-clock statistics to timing.txt.
        #[arg(long)]
        timing: bool,
    },
}

fn with_suffix(prefix: &Path, suffix: &str) -> Result<PathBuf> {
    let name = prefix
        .file_name()
        .ok_or_else(|| Error::Config(format!("output prefix {} has no file name", prefix.display())))?;
    let mut name = name.to_os_string();
    name.push(suffix);
    let path = prefix.with_file_name(name);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(path)
}

fn apply_overrides(fit: &mut FitSection, mode: Option<ModeName>, k: Option<usize>) -> Result<()> {
    if let Some(m) = mode {
        fit.mode = m;
    }
    if let Some(k) = k {
        fit.windows = k;
    }
    fit.validate()
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>, allow: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let mut scenario = cfg.require_scenario()?.clone();
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let policy = if allow {
        PositivityPolicy::Clip
    } else {
        PositivityPolicy::Reject
    };
    let ds = draw_dataset_with(&scenario, policy)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_dataset(out, &ds.records)?;
    let violations = ds.positivity_violations();
    if violations > 0 {
        eprintln!("note: hazard clipped at zero for {violations} subjects");
    }
    Ok(())
}

fn fit_entries(report: &FitReport, est: &Estimates, fit: &FitSection, n: usize, events: usize) -> Vec<(String, String)> {
    let mode = match fit.mode {
        ModeName::Np => "np",
        ModeName::Lc => "lc",
    };
    let opt = |v: Option<f64>| v.map_or(real(f64::NAN), real);
    let mut e = vec![
        ("mode".to_string(), format!("\"{mode}\"")),
        ("n".to_string(), n.to_string()),
        ("events".to_string(), events.to_string()),
        ("converged".to_string(), report.converged.to_string()),
        ("iterations".to_string(), report.iterations.to_string()),
        ("last_change".to_string(), opt(report.trace.last().copied())),
        ("tolerance".to_string(), real(fit.tolerance)),
        ("residual".to_string(), opt(report.residual)),
        ("truncation".to_string(), opt(report.truncation)),
        ("separation".to_string(), report.separation.to_string()),
        ("newton_steps".to_string(), report.newton_steps.to_string()),
        (
            "degenerate_windows".to_string(),
            format!("{:?}", report.degenerate_windows),
        ),
        (
            "singular_jacobian".to_string(),
            est.singular_jacobian().is_some().to_string(),
        ),
    ];
    if let Some(th) = report.theta() {
        e.insert(1, ("windows".to_string(), th.partition().count().to_string()));
        e.insert(2, ("horizon".to_string(), real(th.partition().horizon())));
    }
    e
}

fn fit(data: &Path, out: &Path, mode: Option<ModeName>, k: Option<usize>, config: Option<&Path>) -> Result<()> {
    let mut section = match config {
        Some(p) => load_config(p)?.fit,
        None => FitSection::default(),
    };
    apply_overrides(&mut section, mode, k)?;
    let records = load_dataset(data)?;
    let horizon = records.iter().map(|r| r.time).fold(0.0, f64::max);
    let report = fit_em(&records, section.fit_mode(horizon), None, &section.options())?;
    let est = Estimates::from_fit(&records, &report)?;

    let knots = est.knots();
    let values: Vec<_> = knots.iter().map(|&t| est.cumulative(t)).collect();
    let se: Vec<_> = knots.iter().map(|&t| est.cumulative_se(t)).collect();
    write_curve(&with_suffix(out, "_curve.csv")?, &knots, &values, &se)?;
    write_gamma(&with_suffix(out, "_gamma.csv")?, &est.gamma, &est.gamma_se)?;
    let events = records.iter().filter(|r| r.event).count();
    write_report(
        &with_suffix(out, "_report.txt")?,
        &fit_entries(&report, &est, &section, records.len(), events),
    )?;

    if !report.converged {
        report.require_converged()?;
    }
    if let Some(rcond) = est.singular_jacobian() {
        return Err(Error::SingularJacobian { rcond });
    }
    Ok(())
}

fn aalen(data: &Path, out: &Path) -> Result<()> {
    let records = load_dataset(data)?;
    let fitted = fit_aalen(&records)?;
    let knots: Vec<f64> = std::iter::once(0.0)
        .chain(fitted.curve.knots().iter().copied())
        .collect();
    let values: Vec<_> = knots.iter().map(|&t| fitted.curve.evaluate(t)).collect();
    let variance: Vec<_> = knots.iter().map(|&t| fitted.variance_at(t)).collect();
    let se: Vec<_> = variance
        .iter()
        .map(|v| v.diagonal().map(|d| d.max(0.0).sqrt()))
        .collect();
    write_curve(&with_suffix(out, "_curve.csv")?, &knots, &values, &se)?;
    write_variance(&with_suffix(out, "_variance.csv")?, &knots, &variance)?;
    if let Some(t) = fitted.truncation {
        eprintln!("note: estimation truncated at t = {t}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn experiment(
    config: &Path,
    out: &Path,
    reps: Option<usize>,
    threads: Option<usize>,
    seed: Option<u64>,
    mode: Option<ModeName>,
    k: Option<usize>,
    allow: bool,
    timing: bool,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    let scenario = cfg.require_scenario()?.clone();
    apply_overrides(&mut cfg.fit, mode, k)?;
    if let Some(r) = reps {
        cfg.experiment.reps = r;
    }
    if let Some(s) = seed {
        cfg.experiment.seed = s;
    }
    cfg.experiment.allow_nonpositive_hazard |= allow;
    let summary = run_experiment(&scenario, &cfg.fit, &cfg.experiment, threads)?;
    write_outputs(&summary, out)?;
    if timing {
        write_timing(&summary, out)?;
    }
    eprintln!(
        "{} of {} replications converged; {} subjects with a clipped hazard",
        summary.count(STATUS_OK),
        summary.replications.len(),
        summary.positivity_violations()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            config,
            out,
            seed,
            allow_nonpositive_hazard,
        } => simulate(&config, &out, seed, allow_nonpositive_hazard),
        Command::Fit {
            data,
            out,
            mode,
            k,
            config,
        } => fit(&data, &out, mode, k, config.as_deref()),
        Command::Aalen { data, out } => aalen(&data, &out),
        Command::Experiment {
            config,
            out,
            reps,
            threads,
            seed,
            mode,
            k,
            allow_nonpositive_hazard,
            timing,
        } => experiment(
            &config,
            &out,
            reps,
            threads,
            seed,
            mode,
            k,
            allow_nonpositive_hazard,
            timing,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(_) => ExitCode::from(1),
    }
}
