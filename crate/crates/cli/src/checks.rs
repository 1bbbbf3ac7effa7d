//! Acceptance checks shared by `qtherm verify` and the acceptance test
//! target. Every tolerance is a named constant below.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use qtherm::analytic::{self, AtomFieldState};
use qtherm::engine::{
    density_step, exact_fixed_point, run_process, sample_interval, sample_schedule, stream_rng, InitialState,
    IntervalSampler, Mode, ProcessConfig, Schedule, StepContext,
};
use qtherm::generators::{
    averaged_interval_map, fast_map, propagate_intervals, propagate_intervals_cached, steady_state, SemigroupCache, GeneratorSpec, Generator, Superoperator,
    WeakGenerator, WeakJointGenerator,
};
use qtherm::models::{build_jcm, thermal_state, JcmParams, JointSystem};
use qtherm::qcore::{kron, CMatrix, DensityMatrix, Operator, Propagator, StateVector, C64};
use qtherm::quad::exponential_average;
use qtherm::thermo::{s_tot, second_law_suite, HeatAccounting, SuiteInput, SuiteTolerances};

use crate::commands::{self, CmdError};
use crate::config::{Dynamics, EngineMode, RunConfig, ScheduleKind};

pub const ORACLE_TOL: f64 = 1e-9;
pub const POISSON_REL_TOL: f64 = 1e-6;
pub const ENTROPY_TOL: f64 = 1e-9;
pub const FIRST_LAW_TOL: f64 = 1e-12;
pub const STANDARD_ERRORS: f64 = 4.0;
pub const EINSTEIN_REL_TOL: f64 = 0.05;
pub const STEADY_REL_TOL: f64 = 0.05;
pub const CANONICAL_TOL: f64 = 0.01;
pub const MONOTONE_SLACK: f64 = 1e-9;
pub const MIN_TEMP_REL_TOL: f64 = 0.02;
pub const PLATEAU_SLOPE: f64 = 0.01;
pub const FAST_REL_TOL: f64 = 0.01;
pub const DETUNING_TOL: f64 = 1e-10;
pub const R_TOL: f64 = 1e-9;
pub const KLEIN_TOL: f64 = 1e-10;

const TWO_PI: f64 = 2.0 * PI;

/// Reference state point: resonant full Rabi model, `γ = 0.05`, five photons.
fn reference_point() -> JcmParams {
    JcmParams { omega_a: TWO_PI, omega_b: TWO_PI, gamma: 0.05, n_max: 5, rwa: false }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub relation: &'static str,
    pub bound: f64,
    pub passed: bool,
    /// Reported but not part of the verdict.
    pub informational: bool,
}

impl Check {
    fn new(name: impl Into<String>, measured: f64, relation: &'static str, bound: f64) -> Self {
        let passed = match relation {
            "<" => measured < bound,
            "<=" => measured <= bound,
            ">" => measured > bound,
            ">=" => measured >= bound,
            _ => false,
        };
        Self { name: name.into(), measured, relation, bound, passed, informational: false }
    }

    pub fn lt(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self::new(name, measured, "<", bound)
    }

    pub fn le(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self::new(name, measured, "<=", bound)
    }

    pub fn gt(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self::new(name, measured, ">", bound)
    }

    pub fn ge(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self::new(name, measured, ">=", bound)
    }

    pub fn info(mut self) -> Self {
        self.informational = true;
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Criterion {
    pub id: u32,
    pub title: String,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub seconds: f64,
}

impl Criterion {
    fn new(id: u32, title: &str) -> Self {
        Self { id, title: title.into(), checks: Vec::new(), notes: Vec::new(), seconds: 0.0 }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().filter(|c| !c.informational).all(|c| c.passed)
    }

    /// One summary line.
    pub fn line(&self) -> String {
        let failing: Vec<&str> =
            self.checks.iter().filter(|c| !c.informational && !c.passed).map(|c| c.name.as_str()).collect();
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let mut s = format!("criterion {:>2}: {verdict}  {}  ({:.1} s)", self.id, self.title, self.seconds);
        if !failing.is_empty() {
            let _ = write!(s, "  failing: {}", failing.join("; "));
        }
        s
    }

    /// Multi-line report with every measured value and bound.
    pub fn details(&self) -> String {
        let mut s = self.line();
        s.push('\n');
        for c in &self.checks {
            let tag = match (c.informational, c.passed) {
                (true, _) => "info",
                (false, true) => "ok  ",
                (false, false) => "FAIL",
            };
            let _ = writeln!(s, "    [{tag}] {}: {:.6e} {} {:.3e}", c.name, c.measured, c.relation, c.bound);
        }
        for n in &self.notes {
            let _ = writeln!(s, "    note: {n}");
        }
        s
    }
}

fn timed(id: u32, title: &str, f: impl FnOnce(&mut Criterion) -> Result<(), CmdError>) -> Result<Criterion, CmdError> {
    let start = Instant::now();
    let mut c = Criterion::new(id, title);
    f(&mut c)?;
    c.seconds = start.elapsed().as_secs_f64();
    Ok(c)
}

fn excited_index(n: usize) -> usize {
    // |n-1, e⟩ with atom index e = 1
    (n - 1) * 2 + 1
}

fn ground_index(n: usize) -> usize {
    n * 2
}

// ---------------------------------------------------------------------------

/// 1: numerical joint propagation of the RWA model against the closed-form
/// block amplitudes.
pub fn criterion1() -> Result<Criterion, CmdError> {
    timed(1, "exact dynamics vs closed-form amplitudes", |c| {
        let mut worst = 0.0_f64;
        for gamma in [0.05, 0.3] {
            for delta in [0.0, 0.5] {
                let p = JcmParams { omega_a: TWO_PI, omega_b: TWO_PI + delta, gamma, n_max: 5, rwa: true };
                let sys = build_jcm(&p)?;
                let prop = Propagator::new(&sys.total())?;
                for n in 1..=5 {
                    let (ie, ig) = (excited_index(n), ground_index(n));
                    for k in 0..=400 {
                        let t = 0.25 * k as f64;
                        let amp = analytic::amplitudes(n, t, &p)?;
                        for (start, want) in [(ie, amp.rho_from_excited()), (ig, amp.rho_from_ground())] {
                            let psi = prop.evolve_vector(StateVector::basis(sys.dim(), start)?.amplitudes(), t);
                            let idx = [ie, ig];
                            for i in 0..2 {
                                for j in 0..2 {
                                    let got = psi[idx[i]] * psi[idx[j]].conj();
                                    worst = worst.max((got - want[i][j]).norm());
                                }
                            }
                        }
                    }
                }
            }
        }
        c.checks.push(Check::lt("max element deviation, n ≤ 5, t ∈ [0,100], Δ ∈ {0,0.5}", worst, ORACLE_TOL));
        Ok(())
    })
}

/// 2: closed-form Poisson average of `|b_n|²` against quadrature.
pub fn criterion2() -> Result<Criterion, CmdError> {
    timed(2, "Poisson-averaged transfer probability vs quadrature", |c| {
        let mut worst = 0.0_f64;
        for delta in [0.0, 0.5] {
            let p = JcmParams { omega_a: TWO_PI, omega_b: TWO_PI + delta, gamma: 0.05, n_max: 5, rwa: true };
            for lambda in [1e-4, 1e-2, 1.0, 1e2] {
                for n in [1usize, 5] {
                    let closed = analytic::mean_b2_poisson(n, lambda, &p)?;
                    let op = analytic::rabi_frequency(n, p.gamma).hypot(delta);
                    let q = exponential_average(|t| analytic::b2(n, t, &p), lambda, PI / op, 1.0, 1e-9 * closed)?;
                    worst = worst.max((q.value - closed).abs() / closed);
                }
            }
        }
        c.checks.push(Check::lt("max relative error", worst, POISSON_REL_TOL));
        Ok(())
    })
}

/// Deliberate corruption of the ledgers, used to show that the checks bite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    FlipMeasurementWork,
}

pub const C3_SEEDS: u64 = 64;

/// 3: second-law suite on density-matrix runs at the reference point.
pub fn criterion3(fault: Fault) -> Result<Criterion, CmdError> {
    timed(3, "second-law suite, density-matrix mode, reference point", |c| {
        let sys = build_jcm(&reference_point())?;
        let lambda = 1e-2;
        let mut min_prod = f64::INFINITY;
        let mut min_step = f64::INFINITY;
        let mut max_first = 0.0_f64;
        let mut suite_violations = 0usize;
        let mut intervals = 0usize;
        for seed in 0..C3_SEEDS {
            let mut cfg = ProcessConfig::new(lambda, 1.0, 3.0 / lambda, InitialState::Pure(StateVector::basis(6, 1)?));
            cfg.seed = seed;
            cfg.grid_points = 2;
            let res = run_process(&cfg, &sys)?;
            let ens = res.ensemble.expect("density-matrix mode reports measurement states");
            let mut ledgers = ens.ledgers.clone();
            if fault == Fault::FlipMeasurementWork {
                for l in &mut ledgers {
                    l.w_meas = -l.w_meas;
                }
            }
            intervals += ledgers.len();
            for l in &ledgers {
                min_prod = min_prod.min(l.ds_a + l.ds_b);
                max_first = max_first.max(l.first_law_defect().unwrap_or(f64::INFINITY));
            }
            let s = s_tot(&ledgers);
            for w in s.windows(2) {
                min_step = min_step.min(w[1] - w[0]);
            }
            let input = SuiteInput { ledgers: &ledgers, rho_a: &ens.rho_a, thermal_reservoir: true };
            let rep = second_law_suite(&input, HeatAccounting::Observational, &SuiteTolerances::default())?;
            suite_violations += rep.violations.len();
        }
        c.notes.push(format!("{C3_SEEDS} seeds, {intervals} measurement intervals up to t = 3/λ"));
        c.checks.push(Check::ge("min per-interval ΔS_A + ΔS_B", min_prod, -ENTROPY_TOL));
        c.checks.push(Check::ge("min increment of S_tot at measurements", if min_step.is_finite() { min_step } else { 0.0 }, -ENTROPY_TOL));
        c.checks.push(Check::le("max |ΔH_A - Q - W|", max_first, FIRST_LAW_TOL));
        c.checks.push(Check::le("suite violations (incl. energy balance ΔH_A+ΔH_B = w_meas)", suite_violations as f64, 0.0));
        Ok(())
    })
}

pub const C4_TRAJECTORIES: usize = 10_000;
pub const C4_CHECKPOINTS: usize = 20;

/// 4: trajectory ensemble against density-matrix mode on a shared schedule.
pub fn criterion4() -> Result<Criterion, CmdError> {
    timed(4, "trajectory vs density-matrix consistency", |c| {
        let sys = build_jcm(&reference_point())?;
        let lambda = 1e-2;
        let mut cfg = ProcessConfig::new(lambda, 1.0, 3.0 / lambda, InitialState::Pure(StateVector::basis(6, 1)?));
        cfg.seed = 2024;
        cfg.grid_points = C4_CHECKPOINTS;
        let dm = run_process(&cfg, &sys)?;
        cfg.mode = Mode::Trajectory;
        cfg.n_traj = C4_TRAJECTORIES;
        cfg.schedule = Schedule::Shared;
        let tr = run_process(&cfg, &sys)?;
        let mut worst_z = 0.0_f64;
        let mut worst_excess = f64::NEG_INFINITY;
        for k in 0..C4_CHECKPOINTS {
            let diff = (tr.series.mean_ha[k] - dm.series.mean_ha[k]).abs();
            let se = tr.series.se_ha[k];
            worst_excess = worst_excess.max(diff - STANDARD_ERRORS * se - 1e-12);
            if se > 0.0 {
                worst_z = worst_z.max(diff / se);
            }
        }
        c.notes.push(format!(
            "{C4_TRAJECTORIES} trajectories, {} shared intervals, {C4_CHECKPOINTS} checkpoints",
            dm.records[0].ledgers.len()
        ));
        c.checks.push(Check::le("max |Δ⟨H_A⟩| - 4 SE over checkpoints", worst_excess, 0.0));
        c.checks.push(Check::le("max |Δ⟨H_A⟩|/SE", worst_z, STANDARD_ERRORS).info());
        Ok(())
    })
}

pub const C5_INTERVALS: usize = 10_000;

/// 5: absorption rate of the exact process against the Einstein rate.
pub fn criterion5() -> Result<Criterion, CmdError> {
    timed(5, "Einstein-rate recovery from the exact engine", |c| {
        let delta = 0.5;
        let lambda = 1e-3;
        let beta = 1.0;
        let p = JcmParams { omega_a: TWO_PI, omega_b: TWO_PI + delta, gamma: 0.01, n_max: 6, rwa: true };
        let sys = build_jcm(&p)?;
        let ctx = StepContext::new(&sys)?;
        let n0 = 2;
        let rho_a = StateVector::basis(sys.dim_a, n0)?.to_density();
        let rho_b = thermal_state(&sys.h_b, beta)?;
        let mut rng = stream_rng(5, 0);
        let (mut sum_x, mut sum_t) = (0.0, 0.0);
        for _ in 0..C5_INTERVALS {
            let t = sample_interval(&mut rng, lambda)?;
            let step = density_step(&ctx, &rho_a, &rho_b, beta, t)?;
            sum_x += step.ledger.dh_b / p.omega_b;
            sum_t += t;
        }
        let simulated = sum_x / sum_t;
        let mut pn = vec![0.0; p.n_max + 1];
        pn[n0] = 1.0;
        let state = AtomFieldState::thermal_atom(pn, p.omega_b, beta)?;
        let predicted = analytic::einstein_rate(&state, lambda, &p)?;
        let averaged = lambda
            * (state.sigma_g * analytic::mean_b2_poisson(n0, lambda, &p)?
                - state.sigma_e * analytic::mean_b2_poisson(n0 + 1, lambda, &p)?);
        c.notes.push(format!(
            "Δ_c = {delta}, γ = {}, λ = {lambda}, cavity |{n0}⟩, {C5_INTERVALS} intervals: simulated {simulated:.6e}, predicted {predicted:.6e}",
            p.gamma
        ));
        c.checks.push(Check::lt("relative deviation of simulated rate", (simulated / predicted - 1.0).abs(), EINSTEIN_REL_TOL));
        c.checks.push(Check::lt("Poisson-averaged exact rate vs Einstein rate", (averaged / predicted - 1.0).abs(), EINSTEIN_REL_TOL).info());
        Ok(())
    })
}

pub const C6_INTERVALS: usize = 400;
pub const C6_BURN_IN: usize = 100;
pub const C6_CURVATURE_RUNS: u64 = 200;

fn energy_of(h: &Operator, r: &DensityMatrix) -> f64 {
    h.expectation(r).unwrap_or(f64::NAN)
}

/// 6: weak-coupling interval protocol against the exact process.
pub fn criterion6() -> Result<Criterion, CmdError> {
    timed(6, "weak-coupling vs exact steady states and early transient", |c| {
        let sys = build_jcm(&reference_point())?;
        let beta = 1.0;
        let rho_b = thermal_state(&sys.h_b, beta)?;
        let ctx = StepContext::new(&sys)?;
        let start = StateVector::basis(6, 1)?.to_density();
        let ground = sys.h_a.matrix()[(0, 0)].re;
        // early-time curvature from second differences over one bare period
        let h = TWO_PI / (sys.h_a.matrix()[(1, 1)].re - ground);
        for lambda in [1e-4, 5e-3, 1e-2, 5e-2] {
            let spec = GeneratorSpec::new(&sys, lambda)?;
            let joint = Superoperator::assemble(&WeakJointGenerator::new(&spec, &sys));
            // long shared schedule, tail averages at measurement times
            let mut rng = stream_rng(6, 0);
            let schedule: Vec<f64> =
                (0..C6_INTERVALS).map(|_| sample_interval(&mut rng, lambda)).collect::<qtherm::Result<_>>()?;
            let mut rho = start.clone();
            let mut exact_e = Vec::new();
            for &t in &schedule {
                rho = density_step(&ctx, &rho, &rho_b, beta, t)?.rho_a;
                exact_e.push(energy_of(&sys.h_a, &rho));
            }
            let total: f64 = schedule.iter().sum();
            let weak = propagate_intervals(&joint, sys.dims(), &start, &rho_b, &[0.0, total], &schedule)?;
            let weak_e: Vec<f64> = weak.measurement_states[1..].iter().map(|r| energy_of(&sys.h_a, r)).collect();
            let tail = |v: &[f64]| v[C6_BURN_IN..].iter().sum::<f64>() / (v.len() - C6_BURN_IN) as f64;
            let (ex, wk) = (tail(&exact_e), tail(&weak_e));
            c.checks.push(Check::lt(format!("λ={lambda}: |⟨H_A⟩_weak/⟨H_A⟩_exact - 1| (tail mean)"), (wk / ex - 1.0).abs(), STEADY_REL_TOL));
            c.checks.push(
                Check::lt(format!("λ={lambda}: same for excitation energy ⟨H_A⟩ - E_0"), ((wk - ground) / (ex - ground) - 1.0).abs(), STEADY_REL_TOL),
            );
            // fixed points of the two averaged interval maps
            let fx = exact_fixed_point(&sys, lambda, beta)?;
            let wmap = averaged_interval_map(&joint, lambda, sys.dims(), &rho_b)?;
            let fw = steady_state(&wmap.minus_identity(), &sys.h_a)?;
            let (efx, efw) = (energy_of(&sys.h_a, &fx.rho_ss), energy_of(&sys.h_a, &fw.rho_ss));
            c.checks.push(Check::lt(format!("λ={lambda}: fixed-point ⟨H_A⟩ relative difference"), (efw / efx - 1.0).abs(), STEADY_REL_TOL).info());
            // curvature of the ensemble means at t = 0, h, 2h on common schedules
            let grid = [0.0, h, 2.0 * h];
            let (mut fe, mut fw2) = ([0.0; 3], [0.0; 3]);
            let mut cache = SemigroupCache::new(&joint);
            for seed in 0..C6_CURVATURE_RUNS {
                let mut pc = ProcessConfig::new(lambda, beta, 2.0 * h, InitialState::Density(start.clone()));
                pc.seed = 1000 + seed;
                pc.grid_points = 3;
                let res = run_process(&pc, &sys)?;
                let sched = sample_schedule(&pc)?;
                let w = propagate_intervals_cached(&mut cache, sys.dims(), &start, &rho_b, &grid, &sched)?;
                for k in 0..3 {
                    fe[k] += res.series.mean_ha[k];
                    fw2[k] += energy_of(&sys.h_a, &w.states[k]);
                }
            }
            let curv = |f: [f64; 3]| (f[0] - 2.0 * f[1] + f[2]) / (C6_CURVATURE_RUNS as f64 * h * h);
            let (ce, cw) = (curv(fe), curv(fw2));
            c.notes.push(format!("λ={lambda}: tail ⟨H_A⟩ exact {ex:.6} weak {wk:.6}; curvature exact {ce:.4e} weak {cw:.4e}"));
            c.checks.push(Check::lt(format!("λ={lambda}: product of early curvatures (signs differ)"), ce * cw, 0.0));
        }
        c.notes.push(format!("curvature from second differences with h = {h} (one bare period)"));
        Ok(())
    })
}

/// Steady state of the reduced weak-coupling generator.
fn weak_steady(sys: &JointSystem, lambda: f64, beta: f64) -> qtherm::Result<qtherm::generators::SteadyStateResult> {
    let spec = GeneratorSpec::new(sys, lambda)?;
    let rho_b = thermal_state(&sys.h_b, beta)?;
    let g = WeakGenerator::new(&spec, sys, &rho_b)?;
    steady_state(&Superoperator::assemble(&g), &sys.h_a)
}

/// 7: van Hove limit of the resonant RWA model approaches the Gibbs state.
pub fn criterion7() -> Result<Criterion, CmdError> {
    timed(7, "canonical limit at fixed γ²/λ", |c| {
        let beta = 1.0;
        let ratio = 2.5e-3;
        let gammas = [0.05, 0.02, 0.01];
        for (label, rwa) in [("RWA", true), ("full Rabi (supplementary)", false)] {
            let mut exact_d = Vec::new();
            let mut weak_d = Vec::new();
            for &g in &gammas {
                let p = JcmParams { omega_a: TWO_PI, omega_b: TWO_PI, gamma: g, n_max: 5, rwa };
                let sys = build_jcm(&p)?;
                let gibbs = thermal_state(&sys.h_a, beta)?;
                let lambda = g * g / ratio;
                exact_d.push(exact_fixed_point(&sys, lambda, beta)?.rho_ss.trace_distance(&gibbs)?);
                weak_d.push(weak_steady(&sys, lambda, beta)?.rho_ss.trace_distance(&gibbs)?);
            }
            for (kind, d) in [("exact", &exact_d), ("weak", &weak_d)] {
                let worst_rise = d.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
                c.notes.push(format!("{label} {kind}: trace distances {d:?} at γ = {gammas:?}"));
                c.checks.push(Check::le(format!("{label} {kind}: max increase along γ = 0.05 → 0.01"), worst_rise, MONOTONE_SLACK));
                c.checks.push(Check::lt(format!("{label} {kind}: distance at γ = 0.01"), d[2], CANONICAL_TOL));
            }
        }
        Ok(())
    })
}

/// 8: minimum temperature of the full-Rabi weak-coupling steady state.
pub fn criterion8() -> Result<Criterion, CmdError> {
    timed(8, "minimum temperature plateau", |c| {
        let sys = build_jcm(&reference_point())?;
        let w = TWO_PI;
        let beta = 8.0;
        for x in [0.05, 0.1, 0.5] {
            let lambda = 2.0 * w * x;
            let ss = weak_steady(&sys, lambda, beta)?;
            let predicted = qtherm::generators::min_temp_predict(lambda, w)?;
            c.checks.push(Check::lt(format!("λ/2ω={x}: |(p1/p0)/prediction - 1| at β = 8"), (ss.p1 / ss.p0 / predicted - 1.0).abs(), MIN_TEMP_REL_TOL));
            let db = 0.5;
            let lo = weak_steady(&sys, lambda, beta - db)?.beta_eff;
            let hi = weak_steady(&sys, lambda, beta + db)?.beta_eff;
            let slope = (hi - lo) / (2.0 * db);
            c.checks.push(Check::lt(format!("λ/2ω={x}: |dβ_eff/dβ| at β = 8"), slope.abs(), PLATEAU_SLOPE));
            c.notes.push(format!("λ/2ω={x}: β_eff = {:.5}, limit {:.5}", ss.beta_eff, qtherm::generators::min_temp_beta(lambda, w)?));
        }
        Ok(())
    })
}

/// 9: fast-measurement rate against the composed Poisson average.
pub fn criterion9() -> Result<Criterion, CmdError> {
    timed(9, "fast-measurement limit", |c| {
        let gamma = 0.05;
        let lambda = 100.0 * gamma;
        let rho_b = DensityMatrix::diagonal(&[0.8, 0.2])?;
        let (sg, se) = (0.8, 0.2);
        let mut rates = Vec::new();
        for delta in [0.0, 0.5] {
            let p = JcmParams { omega_a: TWO_PI, omega_b: TWO_PI + delta, gamma, n_max: 5, rwa: true };
            let sys = build_jcm(&p)?;
            let rho_a = thermal_state(&sys.h_a, 0.3)?;
            let joint = DensityMatrix::new(kron(rho_a.matrix(), rho_b.matrix()))?;
            let inc = fast_map(&sys, &joint, lambda)?;
            let n_b = kron(&CMatrix::identity(6, 6), &CMatrix::from_fn(2, 2, |i, j| C64::new(if i == 1 && j == 1 { 1.0 } else { 0.0 }, 0.0)));
            let rate = lambda * qtherm::qcore::trace_product_re(&n_b, &inc.total());
            let pn = rho_a.populations();
            // emission from the top level leaves the truncated space; omit it as the matrix model does
            let mut composed = 0.0;
            let mut closed = 0.0;
            for (n, &pop) in pn.iter().enumerate() {
                let (up, n_up) = if n + 1 < pn.len() {
                    (analytic::mean_b2_poisson(n + 1, lambda, &p)?, (n + 1) as f64)
                } else {
                    (0.0, 0.0)
                };
                composed += pop * (sg * analytic::mean_b2_poisson(n, lambda, &p)? - se * up);
                closed += pop * (sg * n as f64 - se * n_up);
            }
            composed *= lambda;
            closed *= 2.0 * gamma * gamma / lambda;
            c.checks.push(Check::lt(format!("Δ_c={delta}: |fast/closed form - 1|"), (rate / closed - 1.0).abs(), DETUNING_TOL));
            let dev = Check::lt(format!("Δ_c={delta}: |fast/composed - 1|"), (rate / composed - 1.0).abs(), FAST_REL_TOL);
            // off resonance the composition carries an extra (Δ_c/λ)² detuning term absent from the fast limit
            c.checks.push(if delta == 0.0 { dev } else { dev.info() });
            rates.push(rate);
        }
        c.checks.push(Check::lt("fast rate change between Δ_c = 0 and 0.5", (rates[0] - rates[1]).abs(), DETUNING_TOL));
        Ok(())
    })
}

pub const C10_INTERVALS: usize = 1000;

fn random_hermitian(rng: &mut ChaCha8Rng, d: usize) -> CMatrix {
    let m = CMatrix::from_fn(d, d, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    (&m + m.adjoint()) * C64::new(0.5, 0.0)
}

fn random_density(rng: &mut ChaCha8Rng, d: usize) -> qtherm::Result<DensityMatrix> {
    let g = CMatrix::from_fn(d, d, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let m = &g * g.adjoint();
    let tr = m.trace();
    DensityMatrix::new(qtherm::qcore::hermitian_part(&(m / tr)))
}

/// Reduced map of one fixed-length interval followed by purification.
struct IntervalMap<'a> {
    ctx: &'a StepContext,
    rho_b: &'a DensityMatrix,
    t: f64,
}

impl Generator for IntervalMap<'_> {
    fn dim(&self) -> usize {
        self.ctx.sys.dim_a
    }

    fn apply(&self, rho: &CMatrix) -> CMatrix {
        let (da, db) = self.ctx.sys.dims();
        let joint = self.ctx.propagator.evolve_matrix(&kron(rho, self.rho_b.matrix()), self.t);
        qtherm::qcore::partial_trace_matrix(&joint, (da, db), qtherm::qcore::Subsystem::A).expect("fixed dimensions")
    }
}

/// 10: per-interval bounds on random couplings and the diagnostic
/// back-action-as-heat accounting.
pub fn criterion10() -> Result<Criterion, CmdError> {
    timed(10, "Klein / R positivity and back-action diagnostic", |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut min_r = f64::INFINITY;
        let mut min_klein = f64::INFINITY;
        let mut negative_r = 0usize;
        for _ in 0..C10_INTERVALS {
            let da = rng.random_range(2..=6usize);
            let db = rng.random_range(2..=(12 / da));
            let h_a = Operator::hermitian(random_hermitian(&mut rng, da))?;
            let h_b = Operator::hermitian(random_hermitian(&mut rng, db))?;
            let h_ab = Operator::hermitian(random_hermitian(&mut rng, da * db))?;
            let gamma = rng.random_range(0.05..1.0);
            let beta = rng.random_range(0.1..3.0);
            let t = rng.random_range(0.0..5.0);
            let sys = JointSystem::new(h_a, h_b, h_ab, gamma)?;
            let ctx = StepContext::new(&sys)?;
            let rho_a = random_density(&mut rng, da)?;
            let rho_b = thermal_state(&sys.h_b, beta)?;
            let l = density_step(&ctx, &rho_a, &rho_b, beta, t)?.ledger;
            let r = l.r.expect("finite β");
            min_r = min_r.min(r);
            if r < -R_TOL {
                negative_r += 1;
            }
            min_klein = min_klein.min(l.klein_term().expect("finite β"));
        }
        c.notes.push(format!("{C10_INTERVALS} random intervals (dim ≤ 12); {negative_r} with R < -{R_TOL:e}"));
        c.checks.push(Check::ge("min per-interval R", min_r, -R_TOL));
        c.checks.push(Check::ge("min per-interval -W_therm (Klein)", min_klein, -KLEIN_TOL));

        // diagnostic: exact cycles at the reference point, fixed interval 1/λ
        let sys = build_jcm(&reference_point())?;
        let lambda = 1e-2;
        let beta = 1.0;
        let tau = 1.0 / lambda;
        let ctx = StepContext::new(&sys)?;
        let rho_b = thermal_state(&sys.h_b, beta)?;
        let map = Superoperator::assemble(&IntervalMap { ctx: &ctx, rho_b: &rho_b, t: tau });
        let fixed = steady_state(&map.minus_identity(), &sys.h_a)?.rho_ss;
        let mut cfg = ProcessConfig::new(lambda, beta, 8.0 * tau, InitialState::Density(fixed));
        cfg.sampler = IntervalSampler::Fixed(vec![tau]);
        cfg.grid_points = 2;
        let res = run_process(&cfg, &sys)?;
        let ens = res.ensemble.expect("density-matrix mode reports measurement states");
        let input = SuiteInput { ledgers: &ens.ledgers, rho_a: &ens.rho_a, thermal_reservoir: true };
        let tol = SuiteTolerances::default();
        let diag = second_law_suite(&input, HeatAccounting::BackActionAsHeat, &tol)?;
        let obs = second_law_suite(&input, HeatAccounting::Observational, &tol)?;
        let positive = diag.windows.iter().filter(|w| w.heat > tol.cyclic_heat).count();
        c.notes.push(format!(
            "back-action-as-heat: {} cyclic windows, {positive} with ΣR > 0 (max {:.3e}); observational max window heat {:.3e}",
            diag.windows.len(),
            diag.max_window_heat,
            obs.max_window_heat
        ));
        c.checks.push(Check::ge("cyclic windows with ΣR > 0 (diagnostic accounting)", positive as f64, 1.0));
        c.checks.push(Check::le("observational accounting violations on the same cycles", obs.violations.len() as f64, 0.0));
        Ok(())
    })
}

/// Small but complete simulate configuration used for the determinism check.
pub fn determinism_config(out: std::path::PathBuf) -> RunConfig {
    RunConfig {
        horizon: 150.0,
        traj: 300,
        grid_points: 31,
        engine: EngineMode::Trajectory,
        schedule: ScheduleKind::Independent,
        mode: Dynamics::Both,
        seed: 11,
        out,
        ..Default::default()
    }
}

fn csv_files(dir: &std::path::Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut v = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "csv") {
            v.push((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), std::fs::read(&p)?));
        }
    }
    v.sort();
    Ok(v)
}

/// 11: repeated `simulate` runs give byte-identical CSV, also on a
/// single-threaded pool.
pub fn criterion11() -> Result<Criterion, CmdError> {
    timed(11, "bit-identical CSV for a fixed config and seed", |c| {
        let base = std::env::temp_dir().join(format!("qtherm-determinism-{}", std::process::id()));
        let dirs = [base.join("a"), base.join("b"), base.join("c")];
        for d in &dirs {
            let _ = std::fs::remove_dir_all(d);
        }
        commands::simulate(&determinism_config(dirs[0].clone()))?;
        commands::simulate(&determinism_config(dirs[1].clone()))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| CmdError::Io(std::io::Error::other(e.to_string())))?;
        pool.install(|| commands::simulate(&determinism_config(dirs[2].clone())))?;
        let a = csv_files(&dirs[0])?;
        let b = csv_files(&dirs[1])?;
        let t1 = csv_files(&dirs[2])?;
        let _ = std::fs::remove_dir_all(&base);
        c.notes.push(format!("{} CSV files compared", a.len()));
        let mismatch = |x: &[(String, Vec<u8>)], y: &[(String, Vec<u8>)]| {
            if x.len() != y.len() {
                return x.len().max(y.len()) as f64;
            }
            x.iter().zip(y).filter(|(p, q)| p.0 != q.0 || p.1 != q.1).count() as f64
        };
        c.checks.push(Check::ge("CSV files produced", a.len() as f64, 2.0));
        c.checks.push(Check::le("differing files, repeated run", mismatch(&a, &b), 0.0));
        c.checks.push(Check::le("differing files, single-threaded run", mismatch(&a, &t1), 0.0));
        Ok(())
    })
}

pub type CriterionFn = fn() -> Result<Criterion, CmdError>;

pub fn all() -> Vec<(u32, CriterionFn)> {
    vec![
        (1, criterion1),
        (2, criterion2),
        (3, || criterion3(Fault::None)),
        (4, criterion4),
        (5, criterion5),
        (6, criterion6),
        (7, criterion7),
        (8, criterion8),
        (9, criterion9),
        (10, criterion10),
        (11, criterion11),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flipped_measurement_work_is_caught() {
        assert!(criterion3(Fault::None).unwrap().passed());
        let c = criterion3(Fault::FlipMeasurementWork).unwrap();
        assert!(!c.passed());
        let failing: Vec<_> = c.checks.iter().filter(|k| !k.passed).map(|k| k.name.as_str()).collect();
        assert!(failing.iter().any(|n| n.contains("energy balance")), "{failing:?}");
    }

    #[test]
    fn check_relations() {
        assert!(Check::lt("a", 1.0, 2.0).passed);
        assert!(!Check::lt("a", 2.0, 2.0).passed);
        assert!(Check::le("a", 2.0, 2.0).passed);
        assert!(!Check::ge("a", f64::NAN, 0.0).passed);
        let mut c = Criterion::new(0, "t");
        c.checks.push(Check::gt("x", 0.0, 1.0).info());
        assert!(c.passed());
        c.checks.push(Check::gt("y", 0.0, 1.0));
        assert!(!c.passed() && c.line().contains("FAIL"));
    }
}
