//! Run configuration: a flat TOML file plus command-line overrides.
//!
//! Every key is optional; missing keys take the defaults of the reference state
//! point (`ω_A = ω_B = 2π`, `γ = 0.05`, `λ = 10⁻²`, `β = 1`, cavity starting
//! in `|1⟩`).

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qtherm::engine::{BetaSchedule, InitialState, IntervalSampler, Mode, ProcessConfig, Schedule};
use qtherm::models::{thermal_state, JcmParams, JointSystem};
use qtherm::qcore::StateVector;

/// Which dynamics `simulate` and `steady-scan` use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Dynamics {
    Exact,
    Weak,
    Fast,
    Both,
}

impl fmt::Display for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::Weak => "weak",
            Self::Fast => "fast",
            Self::Both => "both",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineMode {
    Density,
    Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Independent,
    Shared,
}

/// Fully resolved configuration. Serialized into every output header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub omega_a: f64,
    pub omega_b: f64,
    pub gamma: f64,
    pub n_max: usize,
    pub rwa: bool,
    pub lambda: f64,
    pub beta: f64,
    /// Per-interval inverse temperatures; overrides `beta` when non-empty.
    pub betas: Vec<f64>,
    pub horizon: f64,
    pub seed: u64,
    pub mode: Dynamics,
    pub engine: EngineMode,
    pub traj: usize,
    pub schedule: ScheduleKind,
    /// Fixed interval lengths (cycled) instead of exponential sampling.
    pub fixed_intervals: Vec<f64>,
    pub grid_points: usize,
    pub initial_fock: usize,
    /// Start from the Gibbs state of `H_A` at this inverse temperature
    /// instead of a Fock state.
    pub initial_beta: Option<f64>,
    pub scan_betas: Vec<f64>,
    pub scan_lambdas: Vec<f64>,
    pub analytic_t_max: f64,
    pub analytic_points: usize,
    /// Output directory. Not serialized, so headers and config hashes do not
    /// depend on where a run is written.
    #[serde(skip_serializing)]
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let omega = 2.0 * PI;
        Self {
            omega_a: omega,
            omega_b: omega,
            gamma: 0.05,
            n_max: 5,
            rwa: false,
            lambda: 1e-2,
            beta: 1.0,
            betas: Vec::new(),
            horizon: 300.0,
            seed: 0,
            mode: Dynamics::Exact,
            engine: EngineMode::Trajectory,
            traj: 5000,
            schedule: ScheduleKind::Independent,
            fixed_intervals: Vec::new(),
            grid_points: 201,
            initial_fock: 1,
            initial_beta: None,
            scan_betas: vec![0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            scan_lambdas: [0.05, 0.1, 0.5].iter().map(|x| x * 2.0 * omega).collect(),
            analytic_t_max: 100.0,
            analytic_points: 1001,
            out: PathBuf::from("out"),
        }
    }
}

/// Bad configuration: file syntax, unknown keys or out-of-range values.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<Dynamics>,
    pub traj: Option<usize>,
}

impl RunConfig {
    /// Parses TOML text; error messages carry the line and key.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: cannot read: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self, ConfigError> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(n) = o.traj {
            self.traj = n;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |name: &str, msg: &str| Err(ConfigError(format!("field `{name}`: {msg}")));
        let finite_pos = |x: f64| x.is_finite() && x > 0.0;
        let beta_ok = |b: f64| !b.is_nan() && b >= 0.0;
        if !finite_pos(self.omega_a) {
            return field("omega_a", "must be finite and > 0");
        }
        if !finite_pos(self.omega_b) {
            return field("omega_b", "must be finite and > 0");
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return field("gamma", "must be finite and ≥ 0");
        }
        if self.n_max < 1 {
            return field("n_max", "must be ≥ 1");
        }
        if !finite_pos(self.lambda) {
            return field("lambda", "must be finite and > 0");
        }
        if !beta_ok(self.beta) {
            return field("beta", "must be ≥ 0");
        }
        if !self.betas.iter().all(|b| beta_ok(*b)) {
            return field("betas", "entries must be ≥ 0");
        }
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return field("horizon", "must be finite and ≥ 0");
        }
        if self.traj < 1 {
            return field("traj", "must be ≥ 1");
        }
        if !self.fixed_intervals.iter().all(|t| finite_pos(*t)) {
            return field("fixed_intervals", "entries must be > 0");
        }
        if self.grid_points < 1 {
            return field("grid_points", "must be ≥ 1");
        }
        if self.initial_fock > self.n_max {
            return field("initial_fock", "must not exceed n_max");
        }
        if let Some(b) = self.initial_beta {
            if !beta_ok(b) {
                return field("initial_beta", "must be ≥ 0");
            }
        }
        if !self.scan_betas.iter().all(|b| beta_ok(*b)) {
            return field("scan_betas", "entries must be ≥ 0");
        }
        if !self.scan_lambdas.iter().all(|l| finite_pos(*l)) {
            return field("scan_lambdas", "entries must be > 0");
        }
        if !finite_pos(self.analytic_t_max) {
            return field("analytic_t_max", "must be > 0");
        }
        if self.analytic_points < 2 {
            return field("analytic_points", "must be ≥ 2");
        }
        Ok(())
    }

    pub fn jcm(&self) -> JcmParams {
        JcmParams { omega_a: self.omega_a, omega_b: self.omega_b, gamma: self.gamma, n_max: self.n_max, rwa: self.rwa }
    }

    pub fn system(&self) -> qtherm::Result<JointSystem> {
        qtherm::models::build_jcm(&self.jcm())
    }

    pub fn initial_state(&self, sys: &JointSystem) -> qtherm::Result<InitialState> {
        Ok(match self.initial_beta {
            Some(b) => InitialState::Density(thermal_state(&sys.h_a, b)?),
            None => InitialState::Pure(StateVector::basis(sys.dim_a, self.initial_fock)?),
        })
    }

    pub fn beta_schedule(&self) -> BetaSchedule {
        if self.betas.is_empty() {
            BetaSchedule::Constant(self.beta)
        } else {
            BetaSchedule::PerInterval(self.betas.clone())
        }
    }

    pub fn sampler(&self) -> IntervalSampler {
        if self.fixed_intervals.is_empty() {
            IntervalSampler::Exponential
        } else {
            IntervalSampler::Fixed(self.fixed_intervals.clone())
        }
    }

    pub fn process(&self, sys: &JointSystem) -> qtherm::Result<ProcessConfig> {
        Ok(ProcessConfig {
            lambda: self.lambda,
            beta: self.beta_schedule(),
            horizon: self.horizon,
            seed: self.seed,
            mode: match self.engine {
                EngineMode::Density => Mode::DensityMatrix,
                EngineMode::Trajectory => Mode::Trajectory,
            },
            n_traj: self.traj,
            initial_state_a: self.initial_state(sys)?,
            sampler: self.sampler(),
            schedule: match self.schedule {
                ScheduleKind::Independent => Schedule::Independent,
                ScheduleKind::Shared => Schedule::Shared,
            },
            grid_points: self.grid_points,
            keep_records: false,
        })
    }

    /// Canonical TOML text of the resolved configuration (without `out`).
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_defaults() {
        let cfg = RunConfig::parse("", "test").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.gamma, 0.05);
        assert_eq!(cfg.lambda, 1e-2);
        assert_eq!(cfg.beta, 1.0);
    }

    #[test]
    fn errors_name_line_and_field() {
        let e = RunConfig::parse("gamma = 0.1\nlamda = 2\n", "cfg.toml").unwrap_err();
        assert!(e.0.contains("line 2") && e.0.contains("lamda"), "{e}");
        let e = RunConfig::parse("gamma = -1\n", "cfg.toml").unwrap_err();
        assert!(e.0.contains("gamma"), "{e}");
        let e = RunConfig::parse("seed = \"x\"\n", "cfg.toml").unwrap_err();
        assert!(e.0.contains("line 1"), "{e}");
    }

    #[test]
    fn overrides_win() {
        let cfg = RunConfig::parse("seed = 3\ntraj = 10\n", "t").unwrap();
        let o = Overrides { seed: Some(9), traj: Some(2), mode: Some(Dynamics::Both), out: None };
        let cfg = cfg.apply(&o).unwrap();
        assert_eq!((cfg.seed, cfg.traj, cfg.mode), (9, 2, Dynamics::Both));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig { initial_beta: Some(0.5), betas: vec![1.0, 2.0], ..Default::default() };
        let back = RunConfig::parse(&cfg.to_toml(), "t").unwrap();
        assert_eq!(back, cfg);
    }
}
