//! The `simulate`, `steady-scan` and `jcm-analytic` commands.

use std::fmt;
use std::path::PathBuf;

use rayon::prelude::*;

use qtherm::analytic;
use qtherm::engine::{self, run_process, sample_schedule_from, time_grid, ProcessResult, TimeSeries};
use qtherm::generators::{
    self, steady_state, GeneratorSpec, PropagationResult, SemigroupCache, Superoperator, WeakGenerator,
    WeakJointGenerator,
};
use qtherm::models::{thermal_state, JointSystem};
use qtherm::qcore::{von_neumann_entropy, CMatrix, DensityMatrix, C64};

use crate::config::{ConfigError, Dynamics, EngineMode, RunConfig, ScheduleKind};
use crate::output::{fmt_f64, header, write_file, Table};
use crate::plot::{Chart, Series};

/// Stream offset for schedules drawn by the averaged-dynamics ensembles, so
/// they never collide with trajectory streams.
const AVERAGED_STREAM_BASE: u64 = 1 << 40;
/// Schedules handled per work unit (fixed, for deterministic summation).
const CHUNK: usize = 32;

#[derive(Debug)]
pub enum CmdError {
    Config(ConfigError),
    Numeric(qtherm::Error),
    Io(std::io::Error),
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(e) => write!(f, "configuration error: {e}"),
            Self::Numeric(e) => write!(f, "numeric failure: {e}"),
            Self::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for CmdError {}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e)
    }
}

impl From<qtherm::Error> for CmdError {
    fn from(e: qtherm::Error) -> Self {
        Self::Numeric(e)
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

/// Files written and warnings raised by a command.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

impl Outcome {
    fn write(&mut self, cfg: &RunConfig, name: &str, content: &str) -> Result<(), CmdError> {
        self.files.push(write_file(&cfg.out, name, content)?);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// simulate

/// Column order of the exact-process time series.
pub const EXACT_COLUMNS: [&str; 14] = [
    "t",
    "mean_HA",
    "mean_HB",
    "mean_HAB",
    "Q_cum",
    "W_cum",
    "Wmeas_cum",
    "S_A",
    "S_tot",
    "n_eff_traj",
    "se_HA",
    "Wtherm_cum",
    "Q_trad",
    "top_fock_pop",
];

/// Column order of the averaged (weak or fast) time series.
pub const AVERAGED_COLUMNS: [&str; 6] = ["t", "mean_HA", "S_A", "Q_trad", "n_eff_traj", "top_fock_pop"];

pub fn exact_table(s: &TimeSeries) -> Table {
    let mut t = Table::new(&EXACT_COLUMNS);
    for k in 0..s.t.len() {
        t.push_floats(&[
            s.t[k],
            s.mean_ha[k],
            s.mean_hb[k],
            s.mean_hab[k],
            s.q_cum[k],
            s.w_cum[k],
            s.wmeas_cum[k],
            s.s_a[k],
            s.s_tot[k],
            s.n_eff_traj[k] as f64,
            s.se_ha[k],
            s.wtherm_cum[k],
            s.q_trad[k],
            s.top_population[k],
        ]);
    }
    t
}

/// Averaged-dynamics time series on the output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedSeries {
    pub t: Vec<f64>,
    pub rho_a: Vec<DensityMatrix>,
    pub n_schedules: usize,
}

impl AveragedSeries {
    pub fn mean_ha(&self, sys: &JointSystem) -> qtherm::Result<Vec<f64>> {
        self.rho_a.iter().map(|r| sys.h_a.expectation(r)).collect()
    }

    pub fn table(&self, sys: &JointSystem) -> qtherm::Result<Table> {
        let mut t = Table::new(&AVERAGED_COLUMNS);
        let ha = self.mean_ha(sys)?;
        let top = sys.truncation_level;
        for (k, r) in self.rho_a.iter().enumerate() {
            t.push_floats(&[
                self.t[k],
                ha[k],
                von_neumann_entropy(r)?,
                ha[k] - ha[0],
                self.n_schedules as f64,
                top.map(|i| r.matrix()[(i, i)].re).unwrap_or(0.0),
            ]);
        }
        Ok(t)
    }
}

fn single_schedule(cfg: &RunConfig) -> bool {
    cfg.engine == EngineMode::Density || cfg.schedule == ScheduleKind::Shared || !cfg.fixed_intervals.is_empty()
}

/// Interval-plus-purification propagation under the weak or fast joint
/// generator, averaged over the same kind of interval schedules as the exact
/// run (one shared schedule, or `traj` independent ones).
pub fn averaged_dynamics(cfg: &RunConfig, sys: &JointSystem, kind: Dynamics) -> Result<AveragedSeries, CmdError> {
    if !cfg.betas.is_empty() {
        return Err(ConfigError("field `betas`: weak and fast modes need a single `beta`".into()).into());
    }
    let rho_b = thermal_state(&sys.h_b, cfg.beta)?;
    let rho_a0 = cfg.initial_state(sys)?.to_density();
    let joint = match kind {
        Dynamics::Weak | Dynamics::Both => {
            let spec = GeneratorSpec::new(sys, cfg.lambda)?;
            Superoperator::assemble(&WeakJointGenerator::new(&spec, sys))
        }
        Dynamics::Fast => Superoperator::assemble(&generators::FastJointGenerator::new(sys, cfg.lambda)),
        Dynamics::Exact => unreachable!("exact dynamics uses the engine"),
    };
    let mut cache = SemigroupCache::new(&joint);
    cache.prepare(cfg.horizon);
    let process = cfg.process(sys)?;
    let grid = time_grid(cfg.horizon, cfg.grid_points);
    let streams: Vec<u64> =
        if single_schedule(cfg) { vec![0] } else { (0..cfg.traj as u64).map(|i| AVERAGED_STREAM_BASE + i).collect() };
    let run = |cache: &mut SemigroupCache, stream: u64| -> qtherm::Result<PropagationResult> {
        let intervals = sample_schedule_from(&process, stream)?;
        generators::propagate_intervals_cached(cache, sys.dims(), &rho_a0, &rho_b, &grid, &intervals)
    };
    let da = sys.dim_a;
    let parts: Vec<qtherm::Result<Vec<CMatrix>>> = streams
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut cache = cache.clone();
            let mut sums = vec![CMatrix::zeros(da, da); grid.len()];
            for &s in chunk {
                let res = run(&mut cache, s)?;
                for (acc, r) in sums.iter_mut().zip(&res.states) {
                    *acc += r.matrix();
                }
            }
            Ok(sums)
        })
        .collect();
    let mut total = vec![CMatrix::zeros(da, da); grid.len()];
    for p in parts {
        for (acc, r) in total.iter_mut().zip(p?) {
            *acc += r;
        }
    }
    let n = streams.len() as f64;
    let rho_a = total
        .into_iter()
        .map(|m| DensityMatrix::new(m / C64::new(n, 0.0)).map_err(CmdError::from))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AveragedSeries { t: grid, rho_a, n_schedules: streams.len() })
}

fn exact_chart(s: &TimeSeries) -> Chart {
    let t = s.t.clone();
    Chart::new("Energy bookkeeping of the measured cavity", "t", "energy")
        .with(Series::new("ΔH_A", t.clone(), s.q_trad.clone()))
        .with(Series::new("Q (entropic heat)", t.clone(), s.q_cum.clone()))
        .with(Series::new("W", t.clone(), s.w_cum.clone()))
        .with(Series::new("W_meas", t.clone(), s.wmeas_cum.clone()))
        .with(Series::new("γ⟨H_AB⟩", t, s.mean_hab.clone()).dashed())
}

/// Runs the requested dynamics and writes time-series CSV and SVG files.
pub fn simulate(cfg: &RunConfig) -> Result<(Outcome, Option<ProcessResult>), CmdError> {
    cfg.validate()?;
    let sys = cfg.system()?;
    let mut out = Outcome::default();
    out.write(cfg, "config.toml", &cfg.to_toml())?;
    let mut exact = None;
    if matches!(cfg.mode, Dynamics::Exact | Dynamics::Both) {
        let res = run_process(&cfg.process(&sys)?, &sys)?;
        if res.truncation_suspect {
            out.warnings.push(format!(
                "truncation suspect: top Fock level population reached {:.3e} (n_max = {})",
                res.max_top_population, cfg.n_max
            ));
        }
        let extra = [("series", "exact".to_string()), ("truncation_suspect", res.truncation_suspect.to_string())];
        let h = header(cfg, "simulate", &extra);
        out.write(cfg, "timeseries_exact.csv", &exact_table(&res.series).to_csv(&h))?;
        out.write(cfg, "timeseries_exact.svg", &exact_chart(&res.series).to_svg())?;
        exact = Some(res);
    }
    let averaged = match cfg.mode {
        Dynamics::Weak | Dynamics::Both => Some(("weak", averaged_dynamics(cfg, &sys, Dynamics::Weak)?)),
        Dynamics::Fast => Some(("fast", averaged_dynamics(cfg, &sys, Dynamics::Fast)?)),
        Dynamics::Exact => None,
    };
    if let Some((name, series)) = &averaged {
        let h = header(cfg, "simulate", &[("series", name.to_string())]);
        let table = series.table(&sys)?;
        out.write(cfg, &format!("timeseries_{name}.csv"), &table.to_csv(&h))?;
        let chart = Chart::new(&format!("{name} dynamics"), "t", "⟨H_A⟩")
            .with(Series::new(format!("⟨H_A⟩ {name}"), series.t.clone(), series.mean_ha(&sys)?));
        out.write(cfg, &format!("timeseries_{name}.svg"), &chart.to_svg())?;
        if let Some(res) = &exact {
            let chart = Chart::new("Exact process against the weak-coupling protocol", "t", "⟨H_A⟩")
                .with(Series::new("exact", res.series.t.clone(), res.series.mean_ha.clone()))
                .with(Series::new("weak coupling", series.t.clone(), series.mean_ha(&sys)?).dashed());
            out.write(cfg, "comparison.svg", &chart.to_svg())?;
        }
    }
    Ok((out, exact))
}

// ---------------------------------------------------------------------------
// steady-scan

pub const SCAN_COLUMNS: [&str; 8] = ["beta", "lambda", "p0", "p1", "beta_eff", "residual", "method", "status"];

/// One steady state: `(p0, p1, beta_eff, residual)` or a flagged failure.
fn steady_point(sys: &JointSystem, method: Dynamics, lambda: f64, beta: f64) -> Result<[f64; 4], String> {
    let rho_b = thermal_state(&sys.h_b, beta).map_err(|e| e.to_string())?;
    let res = match method {
        Dynamics::Exact => engine::exact_fixed_point(sys, lambda, beta),
        Dynamics::Fast => generators::FastGenerator::new(sys, lambda, &rho_b)
            .and_then(|g| steady_state(&Superoperator::assemble(&g), &sys.h_a)),
        _ => GeneratorSpec::new(sys, lambda).and_then(|spec| {
            let g = WeakGenerator::new(&spec, sys, &rho_b)?;
            steady_state(&Superoperator::assemble(&g), &sys.h_a)
        }),
    };
    match res {
        Ok(r) => Ok([r.p0, r.p1, r.beta_eff, r.residual]),
        Err(qtherm::Error::Ambiguous { dim }) => Err(format!("degenerate-null-space-{dim}")),
        Err(e) => Err(format!("failed: {e}").replace(',', ";")),
    }
}

/// Steady states over the `(λ, β)` grid. Degenerate points are flagged in
/// the `status` column and do not abort the scan.
pub fn steady_scan(cfg: &RunConfig) -> Result<Outcome, CmdError> {
    cfg.validate()?;
    let sys = cfg.system()?;
    let methods: Vec<Dynamics> = match cfg.mode {
        Dynamics::Both => vec![Dynamics::Weak, Dynamics::Exact],
        m => vec![m],
    };
    let mut points = Vec::new();
    for &m in &methods {
        for &l in &cfg.scan_lambdas {
            for &b in &cfg.scan_betas {
                points.push((m, l, b));
            }
        }
    }
    let results: Vec<Result<[f64; 4], String>> =
        points.par_iter().map(|&(m, l, b)| steady_point(&sys, m, l, b)).collect();
    let mut table = Table::new(&SCAN_COLUMNS);
    let mut out = Outcome::default();
    for (&(m, l, b), r) in points.iter().zip(&results) {
        let (vals, status) = match r {
            Ok(v) => (*v, "ok".to_string()),
            Err(s) => {
                out.warnings.push(format!("steady state at lambda = {l}, beta = {b} ({m}): {s}"));
                ([f64::NAN; 4], s.clone())
            }
        };
        let mut row: Vec<String> = [b, l].iter().chain(vals.iter()).map(|x| fmt_f64(*x)).collect();
        row.push(m.to_string());
        row.push(status);
        table.push(row);
    }
    out.write(cfg, "config.toml", &cfg.to_toml())?;
    out.write(cfg, "steady_scan.csv", &table.to_csv(&header(cfg, "steady-scan", &[])))?;
    let mut chart = Chart::new("Steady-state inverse temperature", "β (reservoir)", "β_eff (cavity)");
    if let (Some(lo), Some(hi)) = (
        cfg.scan_betas.iter().cloned().reduce(f64::min),
        cfg.scan_betas.iter().cloned().reduce(f64::max),
    ) {
        chart = chart.with(Series::new("β_eff = β", vec![lo, hi], vec![lo, hi]).dashed());
        for &m in &methods {
            for &l in &cfg.scan_lambdas {
                let (x, y): (Vec<f64>, Vec<f64>) = points
                    .iter()
                    .zip(&results)
                    .filter(|((pm, pl, _), _)| *pm == m && *pl == l)
                    .map(|((_, _, b), r)| (*b, r.as_ref().map(|v| v[2]).unwrap_or(f64::NAN)))
                    .unzip();
                chart = chart.with(Series::new(format!("{m} λ/2ω={:.3}", l / (2.0 * cfg.omega_a)), x, y));
            }
        }
        for &l in &cfg.scan_lambdas {
            let limit = generators::min_temp_beta(l, cfg.omega_a)?;
            chart = chart.with(Series::new(format!("limit λ/2ω={:.3}", l / (2.0 * cfg.omega_a)), vec![lo, hi], vec![limit, limit]).dashed());
        }
    }
    out.write(cfg, "steady_scan.svg", &chart.to_svg())?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// jcm-analytic

pub const ANALYTIC_COLUMNS: [&str; 7] = ["t", "n", "re_a", "im_a", "re_b", "im_b", "b2"];

/// Dumps the closed-form block amplitudes `a_n(t)`, `b_n(t)` for
/// `n = 1..=n_max` and their Poisson averages at the configured `λ`.
pub fn jcm_analytic(cfg: &RunConfig) -> Result<Outcome, CmdError> {
    cfg.validate()?;
    let p = cfg.jcm();
    let grid = time_grid(cfg.analytic_t_max, cfg.analytic_points);
    let mut table = Table::new(&ANALYTIC_COLUMNS);
    let mut chart = Chart::new("Closed-form transfer probability", "t", "|b_n(t)|²");
    for n in 1..=cfg.n_max {
        let mut b2 = Vec::with_capacity(grid.len());
        for &t in &grid {
            let a = analytic::amplitudes(n, t, &p)?;
            let v = a.b_n.norm_sqr();
            table.push_floats(&[t, n as f64, a.a_n.re, a.a_n.im, a.b_n.re, a.b_n.im, v]);
            b2.push(v);
        }
        chart = chart.with(Series::new(format!("n = {n}"), grid.clone(), b2));
    }
    let mut avg = Table::new(&["n", "lambda", "mean_b2"]);
    for n in 1..=cfg.n_max {
        avg.push_floats(&[n as f64, cfg.lambda, analytic::mean_b2_poisson(n, cfg.lambda, &p)?]);
    }
    let mut out = Outcome::default();
    let h = header(cfg, "jcm-analytic", &[]);
    out.write(cfg, "config.toml", &cfg.to_toml())?;
    out.write(cfg, "jcm_analytic.csv", &table.to_csv(&h))?;
    out.write(cfg, "jcm_poisson.csv", &avg.to_csv(&h))?;
    out.write(cfg, "jcm_analytic.svg", &chart.to_svg())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("qtherm-cmd-{name}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&d);
        d
    }

    fn small(name: &str) -> RunConfig {
        RunConfig {
            horizon: 60.0,
            traj: 40,
            grid_points: 13,
            out: tmp(name),
            ..Default::default()
        }
    }

    #[test]
    fn simulate_writes_series() {
        let cfg = RunConfig { mode: Dynamics::Both, ..small("both") };
        let (out, exact) = simulate(&cfg).unwrap();
        let names: Vec<String> =
            out.files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        for f in ["timeseries_exact.csv", "timeseries_weak.csv", "comparison.svg", "config.toml"] {
            assert!(names.iter().any(|n| n == f), "{f} missing from {names:?}");
        }
        let text = std::fs::read_to_string(cfg.out.join("timeseries_exact.csv")).unwrap();
        let first_data = text.lines().find(|l| !l.starts_with('#')).unwrap();
        assert_eq!(first_data, EXACT_COLUMNS.join(","));
        assert_eq!(exact.unwrap().series.t.len(), 13);
        std::fs::remove_dir_all(&cfg.out).unwrap();
    }

    #[test]
    fn per_interval_betas_rejected_for_weak() {
        let cfg = RunConfig { mode: Dynamics::Weak, betas: vec![1.0, 2.0], ..small("betas") };
        assert!(matches!(simulate(&cfg), Err(CmdError::Config(_))));
    }

    #[test]
    fn empty_scan_is_header_only() {
        let cfg = RunConfig { scan_betas: vec![], mode: Dynamics::Weak, ..small("scan") };
        steady_scan(&cfg).unwrap();
        let text = std::fs::read_to_string(cfg.out.join("steady_scan.csv")).unwrap();
        let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data, vec![SCAN_COLUMNS.join(",")]);
        std::fs::remove_dir_all(&cfg.out).unwrap();
    }

    #[test]
    fn high_temperature_small_lambda_follows_identity() {
        let cfg = RunConfig {
            scan_betas: vec![0.2, 0.5],
            scan_lambdas: vec![1e-3],
            mode: Dynamics::Weak,
            ..small("identity")
        };
        steady_scan(&cfg).unwrap();
        let text = std::fs::read_to_string(cfg.out.join("steady_scan.csv")).unwrap();
        for l in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
            let f: Vec<&str> = l.split(',').collect();
            let (b, be): (f64, f64) = (f[0].parse().unwrap(), f[4].parse().unwrap());
            assert!((be / b - 1.0).abs() < 1e-3, "{l}");
        }
        std::fs::remove_dir_all(&cfg.out).unwrap();
    }

    #[test]
    fn analytic_dump_has_all_blocks() {
        let cfg = RunConfig { analytic_points: 11, ..small("analytic") };
        jcm_analytic(&cfg).unwrap();
        let text = std::fs::read_to_string(cfg.out.join("jcm_analytic.csv")).unwrap();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 11 * cfg.n_max);
        std::fs::remove_dir_all(&cfg.out).unwrap();
    }
}
