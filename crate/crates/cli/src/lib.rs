//! Command-line front end: `simulate`, `steady-scan`, `jcm-analytic` and
//! `verify`.
//!
//! Exit codes: 0 success, 1 usage, configuration or i/o error, 2 a
//! verification criterion failed, 3 numeric failure.

pub mod checks;
pub mod commands;
pub mod config;
pub mod output;
pub mod plot;

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checks::Criterion;
use crate::commands::{CmdError, Outcome};
use crate::config::{Dynamics, Overrides, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable that fixes the worker thread count.
pub const THREADS_ENV: &str = "QTHERM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "qtherm", version, about = "Repeated-measurement thermodynamics of a cavity coupled to a measured atom")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Time series of the exact process and/or an averaged approximation.
    Simulate(Common),
    /// Steady states over a grid of inverse temperatures and measurement rates.
    SteadyScan(Common),
    /// Closed-form block amplitudes of the rotating-wave model.
    JcmAnalytic(Common),
    /// Run the acceptance criteria and write a report.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Dynamics>,
    /// Number of trajectories.
    #[arg(long)]
    pub traj: Option<usize>,
    /// Suppress warnings on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Directory for report.txt and report.json.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Run only these criteria (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<u32>,
    #[arg(long)]
    pub quiet: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CmdError> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let o = Overrides { seed: self.seed, out: self.out.clone(), mode: self.mode, traj: self.traj };
        Ok(base.apply(&o)?)
    }
}

fn exit_code(e: &CmdError) -> i32 {
    match e {
        CmdError::Config(_) | CmdError::Io(_) => EXIT_USAGE,
        CmdError::Numeric(_) => EXIT_NUMERIC,
    }
}

/// Configures the global thread pool from [`THREADS_ENV`] if set.
pub fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
    if n == 0 {
        return Err(format!("{THREADS_ENV} must be a positive integer, got `{v}`"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn report_outcome(o: &Outcome, quiet: bool) {
    if !quiet {
        for w in &o.warnings {
            eprintln!("warning: {w}");
        }
    }
    for f in &o.files {
        println!("{}", f.display());
    }
}

#[derive(Serialize)]
struct Report<'a> {
    version: &'a str,
    passed: bool,
    criteria: &'a [Criterion],
    errors: Vec<(u32, String)>,
}

/// Completed criteria and the numeric errors of those that could not run.
pub type VerifyResult = (Vec<Criterion>, Vec<(u32, String)>);

/// Runs the selected criteria and writes `report.txt` and `report.json`.
pub fn verify(args: &VerifyArgs) -> Result<VerifyResult, CmdError> {
    let mut done = Vec::new();
    let mut errors = Vec::new();
    for (id, f) in checks::all() {
        if !args.only.is_empty() && !args.only.contains(&id) {
            continue;
        }
        match f() {
            Ok(c) => {
                if !args.quiet {
                    eprintln!("{}", c.line());
                }
                done.push(c);
            }
            Err(e) => {
                if !args.quiet {
                    eprintln!("criterion {id:>2}: ERROR {e}");
                }
                errors.push((id, e.to_string()));
            }
        }
    }
    let passed = errors.is_empty() && done.iter().all(Criterion::passed);
    let mut txt = String::new();
    for c in &done {
        txt.push_str(&c.details());
    }
    for (id, e) in &errors {
        let _ = writeln!(txt, "criterion {id:>2}: ERROR {e}");
    }
    let _ = writeln!(txt, "overall: {}", if passed { "PASS" } else { "FAIL" });
    output::write_file(&args.out, "report.txt", &txt)?;
    let report = Report { version: env!("CARGO_PKG_VERSION"), passed, criteria: &done, errors: errors.clone() };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CmdError::Io(std::io::Error::other(e)))?;
    output::write_file(&args.out, "report.json", &json)?;
    Ok((done, errors))
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    let result = match &cli.command {
        Command::Simulate(c) => c.resolve().and_then(|cfg| commands::simulate(&cfg)).map(|(o, _)| (o, c.quiet)),
        Command::SteadyScan(c) => c.resolve().and_then(|cfg| commands::steady_scan(&cfg)).map(|o| (o, c.quiet)),
        Command::JcmAnalytic(c) => c.resolve().and_then(|cfg| commands::jcm_analytic(&cfg)).map(|o| (o, c.quiet)),
        Command::Verify(v) => {
            return match verify(v) {
                Ok((done, errors)) => {
                    if !errors.is_empty() {
                        EXIT_NUMERIC
                    } else if done.iter().all(Criterion::passed) {
                        EXIT_OK
                    } else {
                        EXIT_VERIFY
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_code(&e)
                }
            };
        }
    };
    match result {
        Ok((o, quiet)) => {
            report_outcome(&o, quiet);
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["qtherm", "no-such-command"]), EXIT_USAGE);
        assert_eq!(run(["qtherm", "simulate", "--config", "/nonexistent/cfg.toml"]), EXIT_USAGE);
    }

    #[test]
    fn bad_config_value_exits_one() {
        let dir = std::env::temp_dir().join(format!("qtherm-cli-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("c.toml");
        std::fs::write(&p, "lambda = -1\n").unwrap();
        assert_eq!(run(["qtherm", "simulate", "--config", p.to_str().unwrap()]), EXIT_USAGE);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn simulate_and_verify_end_to_end() {
        let dir = std::env::temp_dir().join(format!("qtherm-cli-e2e-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = dir.join("c.toml");
        std::fs::write(&cfg, "horizon = 50.0\ntraj = 20\ngrid_points = 11\nlambda = 0.05\n").unwrap();
        let out = dir.join("sim");
        let code = run(["qtherm", "simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
        assert_eq!(code, EXIT_OK);
        let csv = std::fs::read_to_string(out.join("timeseries_exact.csv")).unwrap();
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 12);
        let rep = dir.join("rep");
        assert_eq!(run(["qtherm", "verify", "--only", "9", "--out", rep.to_str().unwrap(), "--quiet"]), EXIT_OK);
        assert!(std::fs::read_to_string(rep.join("report.txt")).unwrap().contains("criterion  9: PASS"));
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(rep.join("report.json")).unwrap()).unwrap();
        assert_eq!(json["passed"], true);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["qtherm", "--help"]), EXIT_OK);
    }
}
