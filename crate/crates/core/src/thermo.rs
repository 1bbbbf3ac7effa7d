//! Heat, work and entropy accounting per measurement interval, plus the
//! second-law checks built on it.
//!
//! Sign conventions: `Q` is heat flowing into the central system,
//! `Q = -ΔS_B/β` with the reservoir entropy taken in its energy basis.
//! The measurement back-action `w_meas = -γ⟨H_AB⟩` is counted as work.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::JointSystem;
use crate::qcore::{diag_entropy, von_neumann_entropy, DensityMatrix, Operator, Propagator};

/// Thermodynamic ledger of one measurement interval. Heat-like entries are
/// `None` when `β = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntervalLedger {
    pub dh_a: f64,
    pub dh_b: f64,
    pub w_meas: f64,
    pub ds_a: f64,
    pub ds_b: f64,
    pub q: Option<f64>,
    pub w_therm: Option<f64>,
    pub w: Option<f64>,
    pub r: Option<f64>,
    pub beta: f64,
}

impl IntervalLedger {
    pub fn zero(beta: f64) -> Self {
        let some = if beta == 0.0 { None } else { Some(0.0) };
        Self { dh_a: 0.0, dh_b: 0.0, w_meas: 0.0, ds_a: 0.0, ds_b: 0.0, q: some, w_therm: some, w: some, r: some, beta }
    }

    /// `ΔH_B - ΔS_B/β`, the free-energy change of the reservoir. Non-negative
    /// for a thermal reservoir input.
    pub fn klein_term(&self) -> Option<f64> {
        self.w_therm.map(|w| -w)
    }

    /// `|ΔH_A + ΔH_B - w_meas|`: the energy released by the measurement must
    /// match the energy gained by the two subsystems.
    pub fn energy_balance_defect(&self) -> f64 {
        (self.dh_a + self.dh_b - self.w_meas).abs()
    }

    /// `|ΔH_A - (Q + W)|`.
    pub fn first_law_defect(&self) -> Option<f64> {
        Some((self.dh_a - (self.q? + self.w?)).abs())
    }

    /// Builds a ledger from already-computed subsystem changes.
    pub fn from_changes(dh_a: f64, dh_b: f64, ds_a: f64, ds_b: f64, w_meas: f64, beta: f64) -> Self {
        if beta == 0.0 {
            return Self { dh_a, dh_b, w_meas, ds_a, ds_b, q: None, w_therm: None, w: None, r: None, beta };
        }
        // β = ∞ gives zero entropic heat
        let ts = if beta.is_infinite() { 0.0 } else { ds_b / beta };
        let q = -ts;
        let w_therm = -dh_b + ts;
        let w = w_therm + dh_a + dh_b;
        let r = dh_a + dh_b - ts;
        Self { dh_a, dh_b, w_meas, ds_a, ds_b, q: Some(q), w_therm: Some(w_therm), w: Some(w), r: Some(r), beta }
    }

    /// Accumulates another ledger (used for ensemble averages and windows).
    pub fn add(&self, o: &Self) -> Self {
        let sum = |a: Option<f64>, b: Option<f64>| Some(a? + b?);
        Self {
            dh_a: self.dh_a + o.dh_a,
            dh_b: self.dh_b + o.dh_b,
            w_meas: self.w_meas + o.w_meas,
            ds_a: self.ds_a + o.ds_a,
            ds_b: self.ds_b + o.ds_b,
            q: sum(self.q, o.q),
            w_therm: sum(self.w_therm, o.w_therm),
            w: sum(self.w, o.w),
            r: sum(self.r, o.r),
            beta: self.beta,
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        let m = |a: Option<f64>| a.map(|x| x * s);
        Self {
            dh_a: self.dh_a * s,
            dh_b: self.dh_b * s,
            w_meas: self.w_meas * s,
            ds_a: self.ds_a * s,
            ds_b: self.ds_b * s,
            q: m(self.q),
            w_therm: m(self.w_therm),
            w: m(self.w),
            r: m(self.r),
            beta: self.beta,
        }
    }
}

fn check_diagonal(rho: &DensityMatrix, basis: &Propagator, what: &str) -> Result<()> {
    let r = basis.to_eigenbasis(rho.matrix());
    let n = r.nrows();
    for i in 0..n {
        for j in 0..n {
            if i != j && r[(i, j)].norm() > 1e-9 {
                return Err(Error::Precondition(format!("{what} must be diagonal in the reservoir energy basis")));
            }
        }
    }
    Ok(())
}

/// Ledger of one interval from the subsystem states at its start and end
/// (reservoir states already dephased) and `⟨H_AB⟩` just before the
/// measurement.
pub fn ledger_for_interval(
    rho_a_start: &DensityMatrix,
    rho_a_end: &DensityMatrix,
    rho_b_start: &DensityMatrix,
    rho_b_end: &DensityMatrix,
    h_ab_expect_pre_meas: f64,
    sys: &JointSystem,
    beta: f64,
) -> Result<IntervalLedger> {
    if beta.is_nan() || beta < 0.0 {
        return Err(Error::InvalidParameter(format!("beta must be ≥ 0, got {beta}")));
    }
    let basis_b = Propagator::new(&sys.h_b)?;
    check_diagonal(rho_b_start, &basis_b, "reservoir start state")?;
    check_diagonal(rho_b_end, &basis_b, "reservoir end state")?;
    let dh_a = sys.h_a.expectation(rho_a_end)? - sys.h_a.expectation(rho_a_start)?;
    let dh_b = sys.h_b.expectation(rho_b_end)? - sys.h_b.expectation(rho_b_start)?;
    let ds_a = von_neumann_entropy(rho_a_end)? - von_neumann_entropy(rho_a_start)?;
    let ds_b = diag_entropy(rho_b_end, &basis_b)? - diag_entropy(rho_b_start, &basis_b)?;
    Ok(IntervalLedger::from_changes(dh_a, dh_b, ds_a, ds_b, -sys.gamma * h_ab_expect_pre_meas, beta))
}

/// Cumulative entropy production `S_tot(t_k) = S_A(t_k) - S_A(0) - Σ β_j Q_j`
/// at each measurement time, starting with 0. Uses `-β Q = ΔS_B`, which is
/// valid for any `β`.
pub fn s_tot(ledgers: &[IntervalLedger]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ledgers.len() + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for l in ledgers {
        acc += l.ds_a + l.ds_b;
        out.push(acc);
    }
    out
}

/// Linearized reservoir entropy and heat for a small change of an initially
/// canonical reservoir: `δS_B = -Σ δp_j ln p_j`, `δQ = -δ⟨H_B⟩`.
pub fn approx_heat_small_change(
    rho_b_start: &DensityMatrix,
    rho_b_end: &DensityMatrix,
    h_b: &Operator,
    beta: f64,
) -> Result<(f64, f64)> {
    if !(beta > 0.0) {
        return Err(Error::InvalidParameter("a canonical reservoir needs β > 0".into()));
    }
    let basis = Propagator::new(h_b)?;
    let p0 = rho_b_start.populations_in(&basis)?;
    let p1 = rho_b_end.populations_in(&basis)?;
    let mut ds = 0.0;
    for (a, b) in p0.iter().zip(&p1) {
        let dp = b - a;
        if dp != 0.0 {
            if *a <= 0.0 {
                return Err(Error::Precondition("start populations must be positive".into()));
            }
            ds -= dp * a.ln();
        }
    }
    let dq = -(h_b.expectation(rho_b_end)? - h_b.expectation(rho_b_start)?);
    Ok((ds, dq))
}

/// Traditional system-only accounting with a time-independent `H_A`:
/// `Q_trad(t) = tr[H_A(ρ_A(t) - ρ_A(0))]` and `W_trad ≡ 0`.
pub fn traditional_qw(rho_a_series: &[DensityMatrix], h_a: &Operator) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some(first) = rho_a_series.first() else {
        return Ok((Vec::new(), Vec::new()));
    };
    let e0 = h_a.expectation(first)?;
    let q = rho_a_series.iter().map(|r| Ok(h_a.expectation(r)? - e0)).collect::<Result<Vec<f64>>>()?;
    let w = vec![0.0; q.len()];
    Ok((q, w))
}

// ---------------------------------------------------------------------------
// second-law suite

/// What is counted as heat when checking cyclic windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HeatAccounting {
    /// `Q = -ΔS_B/β`; measurement back-action is work.
    Observational,
    /// Diagnostic: the back-action energy is counted as heat as well, so the
    /// per-interval heat is `R = ΔH_A + ΔH_B - ΔS_B/β`.
    BackActionAsHeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuiteTolerances {
    pub entropy: f64,
    pub cycle_trace_distance: f64,
    pub cyclic_heat: f64,
    pub klein: f64,
    pub first_law: f64,
    pub energy_balance: f64,
    /// Longest window (in intervals) searched for returns of `ρ_A`.
    pub max_window: usize,
}

impl Default for SuiteTolerances {
    fn default() -> Self {
        Self {
            entropy: 1e-9,
            cycle_trace_distance: 1e-6,
            cyclic_heat: 1e-8,
            klein: 1e-9,
            first_law: 1e-12,
            energy_balance: 1e-9,
            max_window: 64,
        }
    }
}

/// Input for [`second_law_suite`]: ledgers of consecutive intervals and the
/// reduced states at the measurement times (`rho_a.len() == ledgers.len()+1`).
#[derive(Debug, Clone, Copy)]
pub struct SuiteInput<'a> {
    pub ledgers: &'a [IntervalLedger],
    pub rho_a: &'a [DensityMatrix],
    /// Whether every interval started from a thermal reservoir.
    pub thermal_reservoir: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub check: &'static str,
    /// First and one-past-last interval index involved.
    pub intervals: (usize, usize),
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CyclicWindow {
    pub start: usize,
    pub end: usize,
    pub heat: f64,
    pub ds_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecondLawReport {
    pub accounting: HeatAccounting,
    pub tolerances: SuiteTolerances,
    pub intervals: usize,
    pub min_entropy_production: f64,
    pub min_klein_term: f64,
    pub max_first_law_defect: f64,
    pub max_energy_balance_defect: f64,
    /// Smallest per-interval `R`; informational, since only the reservoir
    /// part of `R` is bounded interval by interval.
    pub min_r: f64,
    pub windows: Vec<CyclicWindow>,
    pub max_window_heat: f64,
    pub violations: Vec<Violation>,
}

impl SecondLawReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks, per interval: `ΔS_A + ΔS_B ≥ -tol`, first law, energy balance
/// `ΔH_A + ΔH_B = w_meas`, and (thermal reservoir) `ΔH_B - ΔS_B/β ≥ -tol`.
/// Over windows where `ρ_A` returns to its start within the trace-distance
/// threshold, the summed heat must satisfy
/// `ΣQ ≤ max(0, ΔS_A^window/β) + tol`; the `ΔS_A` term accounts for the
/// residual mismatch of an approximate return.
pub fn second_law_suite(input: &SuiteInput<'_>, accounting: HeatAccounting, tol: &SuiteTolerances) -> Result<SecondLawReport> {
    let n = input.ledgers.len();
    if input.rho_a.len() != n + 1 {
        return Err(Error::shape(n + 1, input.rho_a.len()));
    }
    let mut rep = SecondLawReport {
        accounting,
        tolerances: *tol,
        intervals: n,
        min_entropy_production: f64::INFINITY,
        min_klein_term: f64::INFINITY,
        max_first_law_defect: 0.0,
        max_energy_balance_defect: 0.0,
        min_r: f64::INFINITY,
        windows: Vec::new(),
        max_window_heat: f64::NEG_INFINITY,
        violations: Vec::new(),
    };
    for (k, l) in input.ledgers.iter().enumerate() {
        let sp = l.ds_a + l.ds_b;
        rep.min_entropy_production = rep.min_entropy_production.min(sp);
        if sp < -tol.entropy {
            rep.violations.push(Violation { check: "entropy_production", intervals: (k, k + 1), value: sp, tolerance: tol.entropy });
        }
        if let Some(fl) = l.first_law_defect() {
            rep.max_first_law_defect = rep.max_first_law_defect.max(fl);
            if fl > tol.first_law {
                rep.violations.push(Violation { check: "first_law", intervals: (k, k + 1), value: fl, tolerance: tol.first_law });
            }
        }
        let eb = l.energy_balance_defect();
        rep.max_energy_balance_defect = rep.max_energy_balance_defect.max(eb);
        if eb > tol.energy_balance {
            rep.violations.push(Violation { check: "energy_balance", intervals: (k, k + 1), value: eb, tolerance: tol.energy_balance });
        }
        if let Some(r) = l.r {
            rep.min_r = rep.min_r.min(r);
        }
        if input.thermal_reservoir {
            if let Some(kt) = l.klein_term() {
                rep.min_klein_term = rep.min_klein_term.min(kt);
                if kt < -tol.klein {
                    rep.violations.push(Violation { check: "klein", intervals: (k, k + 1), value: kt, tolerance: tol.klein });
                }
            }
        }
    }
    for start in 0..n {
        let end_max = (start + tol.max_window).min(n);
        for end in start + 1..=end_max {
            let d = input.rho_a[start].trace_distance(&input.rho_a[end])?;
            if d > tol.cycle_trace_distance {
                continue;
            }
            let window = &input.ledgers[start..end];
            let heat: Option<f64> = window
                .iter()
                .map(|l| match accounting {
                    HeatAccounting::Observational => l.q,
                    HeatAccounting::BackActionAsHeat => l.r,
                })
                .sum();
            let Some(heat) = heat else { continue };
            let ds_a: f64 = window.iter().map(|l| l.ds_a).sum();
            // windows may mix temperatures; the slack uses the smallest β
            let beta_min = window.iter().map(|l| l.beta).fold(f64::INFINITY, f64::min);
            let slack = if beta_min.is_finite() { (ds_a / beta_min).max(0.0) } else { 0.0 };
            rep.max_window_heat = rep.max_window_heat.max(heat);
            if heat > slack + tol.cyclic_heat {
                rep.violations.push(Violation { check: "cyclic_heat", intervals: (start, end), value: heat, tolerance: slack + tol.cyclic_heat });
            }
            rep.windows.push(CyclicWindow { start, end, heat, ds_a });
        }
    }
    Ok(rep)
}
