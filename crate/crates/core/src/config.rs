//! Run configuration files.
//!
//! A run file is TOML with up to three tables:
//!
//! ```toml
//! [scenario]            # data-generating mechanism, see `ScenarioConfig`
//! n = 2000
//! horizon = 2.0
//! gamma = [0.5, 1.0]
//! beta = [{ kind = "constant", value = 0.5 }, { kind = "constant", value = 0.25 }]
//! x_laws = [{ law = "normal", mean = 0.0, sd = 1.0 }]
//! z_laws = [{ law = "normal", mean = 0.0, sd = 0.5 }]
//! censoring = { law = "uniform", upper = 2.0 }
//!
//! [fit]                 # all keys optional
//! mode = "lc"           # "lc" (locally constant) or "np" (nonparametric)
//! windows = 20
//!
//! [experiment]          # all keys optional
//! reps = 100
//! seed = 2024
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::fit::{FitMode, FitOptions};
use crate::simulate::ScenarioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Np,
    Lc,
}

impl std::str::FromStr for ModeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "np" => Ok(Self::Np),
            "lc" => Ok(Self::Lc),
            other => Err(Error::Config(format!("unknown mode {other:?}, expected np or lc"))),
        }
    }
}

/// The `[fit]` table.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub mode: ModeName,
    /// Number of windows `K` in locally constant mode.
    pub windows: usize,
    /// Right end of the window grid; defaults to the scenario horizon, or the
    /// largest observed time when fitting a data file.
    pub horizon: Option<f64>,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub accelerate: bool,
    pub newton_refine: bool,
}

impl Default for FitSection {
    fn default() -> Self {
        let o = FitOptions::default();
        Self {
            mode: ModeName::Lc,
            windows: 20,
            horizon: None,
            tolerance: o.tolerance,
            max_iterations: o.max_iterations,
            accelerate: o.accelerate,
            newton_refine: o.newton_refine,
        }
    }
}

impl FitSection {
    pub fn options(&self) -> FitOptions {
        FitOptions {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            accelerate: self.accelerate,
            newton_refine: self.newton_refine,
            ..FitOptions::default()
        }
    }

    /// Fit mode on `[0, horizon]` unless the section pins its own horizon.
    pub fn fit_mode(&self, horizon: f64) -> FitMode {
        match self.mode {
            ModeName::Np => FitMode::Nonparametric,
            ModeName::Lc => FitMode::LocallyConstant {
                windows: self.windows,
                horizon: self.horizon.unwrap_or(horizon),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows == 0 {
            return Err(Error::Config("fit.windows must be at least 1".into()));
        }
        if let Some(h) = self.horizon {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::Config("fit.horizon must be positive".into()));
            }
        }
        self.options().validate()
    }
}

/// The `[experiment]` table.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub reps: usize,
    /// Master seed; replication `r` uses `replication_seed(seed, r)`.
    pub seed: u64,
    /// Points of the equispaced curve grid on `[0, horizon]`.
    pub grid_points: usize,
    /// Times at which `B_hat(t)` is summarized.
    pub report_times: Vec<f64>,
    /// Clip a nonpositive hazard at zero instead of rejecting the scenario.
    pub allow_nonpositive_hazard: bool,
    /// Nominal level of the pointwise confidence intervals.
    pub level: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            reps: 100,
            seed: 2024,
            grid_points: 100,
            report_times: vec![0.5, 1.0, 1.5],
            allow_nonpositive_hazard: false,
            level: 0.95,
        }
    }
}

impl ExperimentSection {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("experiment.reps must be at least 1".into()));
        }
        if self.grid_points < 2 {
            return Err(Error::Config("experiment.grid_points must be at least 2".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config("experiment.level must lie in (0, 1)".into()));
        }
        if self.report_times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::Config("experiment.report_times must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Option<ScenarioConfig>,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.scenario {
            s.validate()?;
        }
        self.fit.validate()?;
        self.experiment.validate()
    }

    pub fn require_scenario(&self) -> Result<&ScenarioConfig> {
        self.scenario
            .as_ref()
            .ok_or_else(|| Error::Config("the configuration has no [scenario] table".into()))
    }
}

/// Parses and validates a run file. Syntax and schema errors carry the line.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() as u64 + 1)
            .unwrap_or(0);
        Error::Parse {
            line,
            message: e.message().to_string(),
        }
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::desk_scenario;

    const DESK: &str = r#"
[scenario]
n = 2000
horizon = 2.0
gamma = [0.5, 1.0]
beta = [{ kind = "constant", value = 0.5 }, { kind = "constant", value = 0.25 }]
x_laws = [{ law = "normal", mean = 0.0, sd = 1.0 }]
z_laws = [{ law = "truncated_normal", mean = 0.0, sd = 0.5, lower = -1.5, upper = 1.5 }]
censoring = { law = "uniform", upper = 2.0 }
seed = 7

[fit]
mode = "lc"
windows = 20
"#;

    #[test]
    fn desk_text_matches_builtin() {
        let c = parse_config(DESK).unwrap();
        assert_eq!(c.scenario.unwrap(), desk_scenario(7));
        assert_eq!(c.fit, FitSection::default());
        assert_eq!(c.experiment, ExperimentSection::default());
    }

    #[test]
    fn fit_only_file() {
        let c = parse_config("[fit]\nmode = \"np\"\n").unwrap();
        assert!(c.scenario.is_none());
        assert_eq!(c.fit.fit_mode(3.0), FitMode::Nonparametric);
        assert!(c.require_scenario().is_err());
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse_config("[fit]\nmode = \"lc\"\nwindowz = 3\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(
            parse_config("[fit]\nwindows = 0\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_config("[experiment]\nreps = 0\n"),
            Err(Error::Config(_))
        ));
        let bad_scenario = DESK.replace("gamma = [0.5, 1.0]", "gamma = [0.5]");
        assert!(matches!(parse_config(&bad_scenario), Err(Error::Config(_))));
    }

    #[test]
    fn mode_names() {
        assert_eq!("np".parse::<ModeName>().unwrap(), ModeName::Np);
        assert!("xx".parse::<ModeName>().is_err());
    }
}
