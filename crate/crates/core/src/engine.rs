//! The repeated-measurement process: couple the central system to a fresh
//! thermal reservoir, evolve jointly for a random interval, measure the
//! reservoir energy, discard it, repeat.
//!
//! Two modes are provided. Density-matrix mode propagates the
//! outcome-averaged state; trajectory mode samples reservoir inputs and
//! measurement outcomes and keeps a pure state of `A`.
//!
//! Random numbers: a master seed feeds one ChaCha8 stream per trajectory
//! (stream `i + 1` for trajectory `i`). Stream 0 draws the interval schedule
//! of density-matrix mode, which trajectories may share. Results are
//! bit-identical for a fixed configuration regardless of thread count.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::generators::{reduce_map, steady_state, Generator, SteadyStateResult, Superoperator};
use crate::models::{thermal_state, JointSystem};
use crate::qcore::{
    c, eigh, kron, partial_trace_matrix, trace_product_re, von_neumann_entropy, CMatrix, CVector, DensityMatrix,
    Propagator, StateVector, Subsystem, C64,
};
use crate::thermo::{ledger_for_interval, IntervalLedger};

/// Top-level population above which a truncated run is flagged.
pub const TRUNCATION_THRESHOLD: f64 = 1e-6;
/// Tolerance for trace and positivity of each interval's output.
pub const MAP_TOLERANCE: f64 = 1e-9;
/// Trajectories handled per work unit; fixed so that summation order does
/// not depend on the thread pool.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    Trajectory,
    DensityMatrix,
}

/// Reservoir inverse temperature per interval. A list shorter than the run
/// repeats its last entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum BetaSchedule {
    Constant(f64),
    PerInterval(Vec<f64>),
}

impl BetaSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match self {
            Self::Constant(b) => *b,
            Self::PerInterval(v) => v[k.min(v.len() - 1)],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |b: f64| !b.is_nan() && b >= 0.0;
        match self {
            Self::Constant(b) if ok(*b) => Ok(()),
            Self::PerInterval(v) if !v.is_empty() && v.iter().all(|b| ok(*b)) => Ok(()),
            _ => Err(Error::InvalidParameter("inverse temperatures must be ≥ 0 (a list must be non-empty)".into())),
        }
    }
}

/// Source of measurement-interval lengths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum IntervalSampler {
    /// Exponential with mean `1/λ` (Poisson measurement times).
    Exponential,
    /// Deterministic lengths, cycled.
    Fixed(Vec<f64>),
}

impl IntervalSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, lambda: f64, k: usize) -> Result<f64> {
        match self {
            Self::Exponential => sample_interval(rng, lambda),
            Self::Fixed(v) => Ok(v[k % v.len()]),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::Fixed(v) if v.is_empty() || v.iter().any(|t| !(*t > 0.0 && t.is_finite())) => {
                Err(Error::InvalidParameter("fixed intervals must be a non-empty list of positive times".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Whether trajectories draw their own interval lengths or reuse the
/// density-matrix schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Schedule {
    Independent,
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Density(DensityMatrix),
    Pure(StateVector),
}

impl InitialState {
    pub fn to_density(&self) -> DensityMatrix {
        match self {
            Self::Density(r) => r.clone(),
            Self::Pure(p) => p.to_density(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Density(r) => r.dim(),
            Self::Pure(p) => p.dim(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProcessConfig {
    pub lambda: f64,
    pub beta: BetaSchedule,
    pub horizon: f64,
    pub seed: u64,
    pub mode: Mode,
    pub n_traj: usize,
    pub initial_state_a: InitialState,
    pub sampler: IntervalSampler,
    pub schedule: Schedule,
    /// Number of evenly spaced output times on `[0, horizon]`.
    pub grid_points: usize,
    /// Keep per-trajectory records in trajectory mode.
    pub keep_records: bool,
}

impl ProcessConfig {
    pub fn new(lambda: f64, beta: f64, horizon: f64, initial_state_a: InitialState) -> Self {
        Self {
            lambda,
            beta: BetaSchedule::Constant(beta),
            horizon,
            seed: 0,
            mode: Mode::DensityMatrix,
            n_traj: 1,
            initial_state_a,
            sampler: IntervalSampler::Exponential,
            schedule: Schedule::Independent,
            grid_points: 101,
            keep_records: false,
        }
    }

    pub fn validate(&self, sys: &JointSystem) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be ≥ 0, got {}", self.horizon)));
        }
        if self.n_traj < 1 {
            return Err(Error::InvalidParameter("n_traj must be ≥ 1".into()));
        }
        if self.grid_points < 1 {
            return Err(Error::InvalidParameter("grid_points must be ≥ 1".into()));
        }
        if self.initial_state_a.dim() != sys.dim_a {
            return Err(Error::shape(sys.dim_a, self.initial_state_a.dim()));
        }
        self.beta.validate()?;
        self.sampler.validate()
    }

    pub fn grid(&self) -> Vec<f64> {
        time_grid(self.horizon, self.grid_points)
    }
}

pub fn time_grid(horizon: f64, points: usize) -> Vec<f64> {
    if points <= 1 || horizon == 0.0 {
        return vec![0.0];
    }
    (0..points).map(|k| horizon * k as f64 / (points - 1) as f64).collect()
}

/// Projective reservoir measurement result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeasurementOutcome {
    pub m: usize,
    pub p_m: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordMeta {
    pub seed: u64,
    pub stream: u64,
    pub truncation_suspect: bool,
    pub max_top_population: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub ledgers: Vec<IntervalLedger>,
    /// Measurement times, starting with 0.
    pub measurement_times: Vec<f64>,
    /// Populations of `ρ_A` at the measurement times.
    pub populations: Vec<Vec<f64>>,
    /// Empty in density-matrix mode.
    pub outcomes: Vec<MeasurementOutcome>,
    pub meta: RecordMeta,
}

/// `Exp(λ)` draw.
pub fn sample_interval<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> Result<f64> {
    let bad = || Error::InvalidParameter(format!("lambda must be > 0, got {lambda}"));
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(bad());
    }
    let exp = Exp::new(lambda).map_err(|_| bad())?;
    Ok(exp.sample(rng))
}

/// RNG for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Interval lengths used by density-matrix mode (stream 0): drawn until
/// their sum exceeds the horizon.
pub fn sample_schedule(cfg: &ProcessConfig) -> Result<Vec<f64>> {
    sample_schedule_from(cfg, 0)
}

/// Interval lengths covering the horizon, drawn from stream `stream`.
pub fn sample_schedule_from(cfg: &ProcessConfig, stream: u64) -> Result<Vec<f64>> {
    let mut rng = stream_rng(cfg.seed, stream);
    let mut out = Vec::new();
    let mut t = 0.0;
    while t <= cfg.horizon {
        let dt = cfg.sampler.sample(&mut rng, cfg.lambda, out.len())?;
        t += dt;
        out.push(dt);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// single interval

/// Per-system quantities reused by every interval.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub sys: JointSystem,
    pub propagator: Propagator,
    basis_b: CMatrix,
    h_a: CMatrix,
    h_b: CMatrix,
    h_ab: CMatrix,
}

impl StepContext {
    pub fn new(sys: &JointSystem) -> Result<Self> {
        let propagator = Propagator::new(&sys.total())?;
        let (_, basis_b) = eigh(sys.h_b.matrix());
        Ok(Self {
            sys: sys.clone(),
            propagator,
            basis_b,
            h_a: sys.h_a_joint(),
            h_b: sys.h_b_joint(),
            h_ab: sys.h_ab.matrix().clone(),
        })
    }

    pub fn reservoir_basis(&self) -> &CMatrix {
        &self.basis_b
    }

    fn dims(&self) -> (usize, usize) {
        self.sys.dims()
    }

    /// Populations of `rho_b` in the reservoir energy basis; rejects
    /// coherent inputs.
    pub fn reservoir_populations(&self, rho_b: &DensityMatrix) -> Result<Vec<f64>> {
        let r = self.basis_b.adjoint() * rho_b.matrix() * &self.basis_b;
        let n = r.nrows();
        for i in 0..n {
            for j in 0..n {
                if i != j && r[(i, j)].norm() > 1e-10 {
                    return Err(Error::Precondition(
                        "reservoir input must be diagonal in its energy basis".into(),
                    ));
                }
            }
        }
        Ok((0..n).map(|i| r[(i, i)].re).collect())
    }

    fn dephased(&self, pops: &[f64]) -> DensityMatrix {
        let n = pops.len();
        let d = CMatrix::from_fn(n, n, |i, j| if i == j { c(pops[i]) } else { C64::new(0.0, 0.0) });
        DensityMatrix::from_matrix_unchecked(&self.basis_b * d * self.basis_b.adjoint())
    }
}

/// Outcome-averaged result of one interval.
#[derive(Debug, Clone)]
pub struct DensityStep {
    /// `Tr_B` of the evolved joint state: the purified central state.
    pub rho_a: DensityMatrix,
    /// Dephased reservoir state after measurement.
    pub rho_b: DensityMatrix,
    /// Born probabilities of the reservoir energy levels.
    pub outcome_probabilities: Vec<f64>,
    /// `⟨H_AB⟩` (without `γ`) just before the measurement.
    pub h_ab_pre: f64,
    pub h_a_pre: f64,
    pub h_b_pre: f64,
    pub ledger: IntervalLedger,
}

/// Sampled result of one interval.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub psi_a: StateVector,
    pub outcome: MeasurementOutcome,
}

/// Density-matrix interval: couple, evolve for `t`, dephase the reservoir in
/// its energy basis and purify.
pub fn density_step(ctx: &StepContext, rho_a: &DensityMatrix, rho_b: &DensityMatrix, beta: f64, t: f64) -> Result<DensityStep> {
    let (da, db) = ctx.dims();
    if rho_a.dim() != da || rho_b.dim() != db {
        return Err(Error::shape(format!("{da} and {db}"), format!("{} and {}", rho_a.dim(), rho_b.dim())));
    }
    ctx.reservoir_populations(rho_b)?;
    let joint = ctx.propagator.evolve_matrix(&kron(rho_a.matrix(), rho_b.matrix()), t);
    let ra = partial_trace_matrix(&joint, (da, db), Subsystem::A)?;
    let rb = partial_trace_matrix(&joint, (da, db), Subsystem::B)?;
    let rb_eig = ctx.basis_b.adjoint() * &rb * &ctx.basis_b;
    let probs: Vec<f64> = (0..db).map(|m| rb_eig[(m, m)].re).collect();
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::NotNormalized { value: total });
    }
    let rho_a_end = DensityMatrix::from_matrix_unchecked(ra);
    let min = rho_a_end.min_eigenvalue();
    if min < -MAP_TOLERANCE {
        return Err(Error::NotPositive { min_eigenvalue: min });
    }
    let rho_b_end = ctx.dephased(&probs);
    let h_ab_pre = trace_product_re(&ctx.h_ab, &joint);
    let ledger = ledger_for_interval(rho_a, &rho_a_end, rho_b, &rho_b_end, h_ab_pre, &ctx.sys, beta)?;
    Ok(DensityStep {
        h_a_pre: trace_product_re(&ctx.h_a, &joint),
        h_b_pre: trace_product_re(&ctx.h_b, &joint),
        rho_a: rho_a_end,
        rho_b: rho_b_end,
        outcome_probabilities: probs,
        h_ab_pre,
        ledger,
    })
}

/// Wavefunction interval: reservoir starts in energy level `level`, the
/// pair evolves for `t`, the reservoir energy is measured (Born rule) and
/// `A` collapses to the conditional state.
pub fn trajectory_step<R: Rng + ?Sized>(
    ctx: &StepContext,
    psi_a: &StateVector,
    level: usize,
    t: f64,
    rng: &mut R,
) -> Result<TrajectoryStep> {
    let (da, db) = ctx.dims();
    if psi_a.dim() != da {
        return Err(Error::shape(da, psi_a.dim()));
    }
    if level >= db {
        return Err(Error::InvalidParameter(format!("reservoir level {level} out of range")));
    }
    let b_in: CVector = ctx.basis_b.column(level).into_owned();
    let joint = ctx.propagator.evolve_vector(&psi_a.amplitudes().kronecker(&b_in), t);
    // conditional (unnormalized) states of A for each outcome
    let mut branches: Vec<CVector> = Vec::with_capacity(db);
    let mut probs = Vec::with_capacity(db);
    for m in 0..db {
        let phi = CVector::from_fn(da, |i, _| {
            (0..db).map(|k| joint[i * db + k] * ctx.basis_b[(k, m)].conj()).sum::<C64>()
        });
        probs.push(phi.norm_squared());
        branches.push(phi);
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::NotNormalized { value: total });
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut m = db - 1;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            m = k;
            break;
        }
    }
    // never pick a branch of zero weight through round-off at the top end
    while probs[m] == 0.0 && m > 0 {
        m -= 1;
    }
    let phi = &branches[m];
    let psi = StateVector::from_vector_unchecked(phi / c(phi.norm()));
    Ok(TrajectoryStep { psi_a: psi, outcome: MeasurementOutcome { m, p_m: probs[m], t } })
}

/// Either kind of interval input.
#[derive(Debug, Clone)]
pub enum StepInput<'a> {
    Density { rho_a: &'a DensityMatrix, rho_b: &'a DensityMatrix },
    Pure { psi_a: &'a StateVector, level: usize },
}

#[derive(Debug, Clone)]
pub enum StepOutput {
    Density(DensityStep),
    Pure(TrajectoryStep),
}

/// One measurement interval in either mode. `beta` is only used for the
/// density-matrix ledger.
pub fn step_interval<R: Rng + ?Sized>(
    ctx: &StepContext,
    input: StepInput<'_>,
    beta: f64,
    t: f64,
    rng: &mut R,
) -> Result<StepOutput> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("interval length must be ≥ 0, got {t}")));
    }
    match input {
        StepInput::Density { rho_a, rho_b } => Ok(StepOutput::Density(density_step(ctx, rho_a, rho_b, beta, t)?)),
        StepInput::Pure { psi_a, level } => Ok(StepOutput::Pure(trajectory_step(ctx, psi_a, level, t, rng)?)),
    }
}

// ---------------------------------------------------------------------------
// whole process

/// Ensemble-averaged observables on the output grid. Heat-like columns are
/// NaN when `β = 0`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TimeSeries {
    pub t: Vec<f64>,
    pub mean_ha: Vec<f64>,
    pub mean_hb: Vec<f64>,
    /// Interaction energy `γ⟨H_AB⟩`.
    pub mean_hab: Vec<f64>,
    pub q_cum: Vec<f64>,
    pub w_cum: Vec<f64>,
    pub wmeas_cum: Vec<f64>,
    pub s_a: Vec<f64>,
    pub s_tot: Vec<f64>,
    pub n_eff_traj: Vec<usize>,
    pub se_ha: Vec<f64>,
    pub wtherm_cum: Vec<f64>,
    pub q_trad: Vec<f64>,
    pub top_population: Vec<f64>,
}

/// Per-interval averages when every member of the ensemble shares the same
/// measurement times.
#[derive(Debug, Clone)]
pub struct EnsembleIntervals {
    pub measurement_times: Vec<f64>,
    pub ledgers: Vec<IntervalLedger>,
    /// Mean `ρ_A` at each measurement time, starting with the initial state.
    pub rho_a: Vec<DensityMatrix>,
}

#[derive(Debug, Clone)]
pub struct ProcessResult {
    pub mode: Mode,
    pub series: TimeSeries,
    pub records: Vec<TrajectoryRecord>,
    pub ensemble: Option<EnsembleIntervals>,
    pub truncation_suspect: bool,
    pub max_top_population: f64,
}

// Sums over the ensemble at each grid point.
#[derive(Debug, Clone)]
struct GridAccumulator {
    rho_a: Vec<CMatrix>,
    ha: Vec<f64>,
    ha2: Vec<f64>,
    hb: Vec<f64>,
    hab: Vec<f64>,
    q: Vec<f64>,
    w: Vec<f64>,
    wmeas: Vec<f64>,
    wtherm: Vec<f64>,
    ds_b: Vec<f64>,
    count: usize,
    // interval-indexed sums, used only with a shared schedule
    ledgers: Vec<IntervalLedger>,
    rho_meas: Vec<CMatrix>,
    max_top: f64,
}

impl GridAccumulator {
    fn new(points: usize, da: usize) -> Self {
        let z = vec![0.0; points];
        Self {
            rho_a: vec![CMatrix::zeros(da, da); points],
            ha: z.clone(),
            ha2: z.clone(),
            hb: z.clone(),
            hab: z.clone(),
            q: z.clone(),
            w: z.clone(),
            wmeas: z.clone(),
            wtherm: z.clone(),
            ds_b: z,
            count: 0,
            ledgers: Vec::new(),
            rho_meas: Vec::new(),
            max_top: 0.0,
        }
    }

    fn merge(&mut self, o: &Self) {
        for (a, b) in self.rho_a.iter_mut().zip(&o.rho_a) {
            *a += b;
        }
        let pairs: [(&mut Vec<f64>, &Vec<f64>); 9] = [
            (&mut self.ha, &o.ha),
            (&mut self.ha2, &o.ha2),
            (&mut self.hb, &o.hb),
            (&mut self.hab, &o.hab),
            (&mut self.q, &o.q),
            (&mut self.w, &o.w),
            (&mut self.wmeas, &o.wmeas),
            (&mut self.wtherm, &o.wtherm),
            (&mut self.ds_b, &o.ds_b),
        ];
        for (a, b) in pairs {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.count += o.count;
        merge_interval_sums(&mut self.ledgers, &mut self.rho_meas, &o.ledgers, &o.rho_meas);
        self.max_top = self.max_top.max(o.max_top);
    }
}

fn merge_interval_sums(ls: &mut Vec<IntervalLedger>, rs: &mut Vec<CMatrix>, ol: &[IntervalLedger], or: &[CMatrix]) {
    for (k, l) in ol.iter().enumerate() {
        if k < ls.len() {
            ls[k] = ls[k].add(l);
        } else {
            ls.push(*l);
        }
    }
    for (k, r) in or.iter().enumerate() {
        if k < rs.len() {
            rs[k] += r;
        } else {
            rs.push(r.clone());
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Cumulative {
    q: f64,
    w: f64,
    wmeas: f64,
    wtherm: f64,
    ds_b: f64,
}

impl Cumulative {
    fn plus(&self, l: &IntervalLedger) -> Self {
        Self {
            q: self.q + l.q.unwrap_or(f64::NAN),
            w: self.w + l.w.unwrap_or(f64::NAN),
            wmeas: self.wmeas + l.w_meas,
            wtherm: self.wtherm + l.w_therm.unwrap_or(f64::NAN),
            ds_b: self.ds_b + l.ds_b,
        }
    }
}

struct Runner<'a> {
    cfg: &'a ProcessConfig,
    ctx: StepContext,
    grid: Vec<f64>,
    shared: Option<Vec<f64>>,
    thermal: Vec<(f64, DensityMatrix, Vec<f64>)>,
    top_index: Option<usize>,
}

impl<'a> Runner<'a> {
    fn thermal(&self, beta: f64) -> &(f64, DensityMatrix, Vec<f64>) {
        self.thermal.iter().find(|(b, _, _)| *b == beta).expect("thermal states precomputed")
    }

    fn top(&self, rho: &CMatrix) -> f64 {
        match self.top_index {
            Some(i) => rho[(i, i)].re,
            None => 0.0,
        }
    }

    fn record_grid(&self, acc: &mut GridAccumulator, g: usize, step: &DensityStep, cum: &Cumulative, gamma: f64) {
        let cur = cum.plus(&step.ledger);
        let rho = step.rho_a.matrix();
        acc.rho_a[g] += rho;
        acc.ha[g] += step.h_a_pre;
        acc.ha2[g] += step.h_a_pre * step.h_a_pre;
        acc.hb[g] += step.h_b_pre;
        acc.hab[g] += gamma * step.h_ab_pre;
        acc.q[g] += cur.q;
        acc.w[g] += cur.w;
        acc.wmeas[g] += cur.wmeas;
        acc.wtherm[g] += cur.wtherm;
        acc.ds_b[g] += cur.ds_b;
        acc.max_top = acc.max_top.max(self.top(rho));
    }

    /// Density-matrix run (one member) or one trajectory.
    fn run_member(&self, stream: Option<u64>, acc: &mut GridAccumulator) -> Result<TrajectoryRecord> {
        let cfg = self.cfg;
        let (_, db) = self.ctx.dims();
        let gamma = self.ctx.sys.gamma;
        let mut rng = stream_rng(cfg.seed, stream.unwrap_or(0));
        let trajectory = stream.is_some();
        let mut record = TrajectoryRecord {
            ledgers: Vec::new(),
            measurement_times: vec![0.0],
            populations: Vec::new(),
            outcomes: Vec::new(),
            meta: RecordMeta {
                seed: cfg.seed,
                stream: stream.unwrap_or(0),
                truncation_suspect: false,
                max_top_population: 0.0,
            },
        };
        // state of A: density matrix, or pure vector in trajectory mode
        let mut psi: Option<StateVector> = None;
        let mut rho = cfg.initial_state_a.to_density();
        if trajectory {
            let p = match &cfg.initial_state_a {
                InitialState::Pure(p) => p.clone(),
                InitialState::Density(r) => sample_pure(r, &mut rng)?,
            };
            rho = p.to_density();
            psi = Some(p);
        }
        record.populations.push(rho.populations());
        let mut member_ledgers: Vec<IntervalLedger> = Vec::new();
        let mut member_rhos: Vec<CMatrix> = vec![rho.matrix().clone()];
        let mut cum = Cumulative::default();
        let mut t_start = 0.0;
        let mut g = 0;
        let mut k = 0;
        let mut max_top = self.top(rho.matrix());
        loop {
            let beta = cfg.beta.at(k);
            let dt = match (&self.shared, trajectory) {
                (Some(s), _) => s.get(k).copied().ok_or_else(|| Error::Precondition("shared schedule exhausted".into()))?,
                (None, true) => cfg.sampler.sample(&mut rng, cfg.lambda, k)?,
                (None, false) => unreachable!("density-matrix mode always uses the stream-0 schedule"),
            };
            let t_end = t_start + dt;
            let (_, rho_b, pops) = self.thermal(beta);
            while g < self.grid.len() && self.grid[g] < t_end {
                let partial = density_step(&self.ctx, &rho, rho_b, beta, self.grid[g] - t_start)?;
                max_top = max_top.max(self.top(partial.rho_a.matrix()));
                self.record_grid(acc, g, &partial, &cum, gamma);
                g += 1;
            }
            if t_end > cfg.horizon {
                break;
            }
            let step = density_step(&self.ctx, &rho, rho_b, beta, dt)?;
            if let Some(p) = psi.as_ref() {
                let level = sample_level(pops, &mut rng);
                let ts = trajectory_step(&self.ctx, p, level, dt, &mut rng)?;
                record.outcomes.push(ts.outcome);
                rho = ts.psi_a.to_density();
                psi = Some(ts.psi_a);
            } else {
                rho = step.rho_a.clone();
            }
            let _ = db;
            cum = cum.plus(&step.ledger);
            max_top = max_top.max(self.top(rho.matrix()));
            record.ledgers.push(step.ledger);
            record.measurement_times.push(t_end);
            record.populations.push(rho.populations());
            if self.shared.is_some() {
                member_ledgers.push(step.ledger);
                member_rhos.push(rho.matrix().clone());
            }
            t_start = t_end;
            k += 1;
        }
        acc.count += 1;
        acc.max_top = acc.max_top.max(max_top);
        if self.shared.is_some() {
            merge_interval_sums(&mut acc.ledgers, &mut acc.rho_meas, &member_ledgers, &member_rhos);
        }
        record.meta.max_top_population = max_top;
        record.meta.truncation_suspect = self.top_index.is_some() && max_top > TRUNCATION_THRESHOLD;
        Ok(record)
    }
}

fn sample_level<R: Rng + ?Sized>(pops: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (m, p) in pops.iter().enumerate() {
        acc += p;
        if u < acc {
            return m;
        }
    }
    pops.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn sample_pure<R: Rng + ?Sized>(rho: &DensityMatrix, rng: &mut R) -> Result<StateVector> {
    let (w, v) = eigh(rho.matrix());
    let pops: Vec<f64> = w.iter().map(|x| x.max(0.0)).collect();
    let total: f64 = pops.iter().sum();
    let normalized: Vec<f64> = pops.iter().map(|p| p / total).collect();
    let k = sample_level(&normalized, rng);
    StateVector::normalized(v.column(k).into_owned())
}

/// Runs the full process on `sys`.
pub fn run_process(cfg: &ProcessConfig, sys: &JointSystem) -> Result<ProcessResult> {
    cfg.validate(sys)?;
    let ctx = StepContext::new(sys)?;
    let mut betas: Vec<f64> = match &cfg.beta {
        BetaSchedule::Constant(b) => vec![*b],
        BetaSchedule::PerInterval(v) => v.clone(),
    };
    betas.sort_by(f64::total_cmp);
    betas.dedup();
    let mut thermal = Vec::new();
    for b in betas {
        let rho_b = thermal_state(&sys.h_b, b)?;
        let pops = ctx.reservoir_populations(&rho_b)?;
        thermal.push((b, rho_b, pops));
    }
    let shared = match (cfg.mode, cfg.schedule) {
        (Mode::DensityMatrix, _) | (Mode::Trajectory, Schedule::Shared) => Some(sample_schedule(cfg)?),
        _ => None,
    };
    let runner = Runner { cfg, ctx, grid: cfg.grid(), shared, thermal, top_index: sys.truncation_level };
    let (da, _) = sys.dims();
    let points = runner.grid.len();

    let (acc, records) = match cfg.mode {
        Mode::DensityMatrix => {
            let mut acc = GridAccumulator::new(points, da);
            let rec = runner.run_member(None, &mut acc)?;
            (acc, vec![rec])
        }
        Mode::Trajectory => {
            let chunks: Vec<(usize, usize)> =
                (0..cfg.n_traj).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(cfg.n_traj))).collect();
            let parts: Vec<Result<(GridAccumulator, Vec<TrajectoryRecord>)>> = chunks
                .par_iter()
                .map(|&(lo, hi)| {
                    let mut acc = GridAccumulator::new(points, da);
                    let mut recs = Vec::new();
                    for i in lo..hi {
                        let rec = runner.run_member(Some(i as u64 + 1), &mut acc)?;
                        if cfg.keep_records {
                            recs.push(rec);
                        } else if rec.meta.truncation_suspect {
                            // keep the flag even when records are dropped
                            acc.max_top = acc.max_top.max(rec.meta.max_top_population);
                        }
                    }
                    Ok((acc, recs))
                })
                .collect();
            let mut acc = GridAccumulator::new(points, da);
            let mut records = Vec::new();
            for p in parts {
                let (a, r) = p?;
                acc.merge(&a);
                records.extend(r);
            }
            (acc, records)
        }
    };
    let n = acc.count as f64;
    let mut series = TimeSeries { t: runner.grid.clone(), ..Default::default() };
    let rho0 = cfg.initial_state_a.to_density();
    let s_a0 = von_neumann_entropy(&rho0)?;
    let h_a0 = sys.h_a.expectation(&rho0)?;
    for g in 0..points {
        let mean_rho = DensityMatrix::from_matrix_unchecked(&acc.rho_a[g] / c(n));
        let s_a = von_neumann_entropy(&mean_rho)?;
        let ha = acc.ha[g] / n;
        series.mean_ha.push(ha);
        series.mean_hb.push(acc.hb[g] / n);
        series.mean_hab.push(acc.hab[g] / n);
        series.q_cum.push(acc.q[g] / n);
        series.w_cum.push(acc.w[g] / n);
        series.wmeas_cum.push(acc.wmeas[g] / n);
        series.wtherm_cum.push(acc.wtherm[g] / n);
        series.s_a.push(s_a);
        series.s_tot.push(s_a - s_a0 + acc.ds_b[g] / n);
        series.n_eff_traj.push(acc.count);
        let var = if acc.count > 1 { ((acc.ha2[g] / n - ha * ha) * n / (n - 1.0)).max(0.0) } else { 0.0 };
        series.se_ha.push((var / n).sqrt());
        series.q_trad.push(ha - h_a0);
        series.top_population.push(match sys.truncation_level {
            Some(i) => mean_rho.matrix()[(i, i)].re,
            None => 0.0,
        });
    }
    let ensemble = runner.shared.as_ref().map(|s| {
        let m = acc.ledgers.len();
        let mut times = vec![0.0];
        let mut t = 0.0;
        for dt in s.iter().take(m) {
            t += dt;
            times.push(t);
        }
        EnsembleIntervals {
            measurement_times: times,
            ledgers: acc.ledgers.iter().map(|l| l.scale(1.0 / n)).collect(),
            rho_a: acc.rho_meas.iter().map(|r| DensityMatrix::from_matrix_unchecked(r / c(n))).collect(),
        }
    });
    let max_top = acc.max_top.max(records.iter().map(|r| r.meta.max_top_population).fold(0.0, f64::max));
    Ok(ProcessResult {
        mode: cfg.mode,
        series,
        records,
        ensemble,
        truncation_suspect: sys.truncation_level.is_some() && max_top > TRUNCATION_THRESHOLD,
        max_top_population: max_top,
    })
}

// ---------------------------------------------------------------------------
// averaged dynamics

/// Exact Poisson average of the joint unitary evolution:
/// `X ↦ λ∫e^{-λt} U(t) X U(t)† dt`, i.e. element `(k,l)` in the energy basis
/// of `H` is multiplied by `λ/(λ + i(E_k - E_l))`.
pub struct AveragedEvolution<'a> {
    prop: &'a Propagator,
    weights: CMatrix,
}

impl<'a> AveragedEvolution<'a> {
    pub fn new(prop: &'a Propagator, lambda: f64) -> Self {
        let e: &DVector<f64> = prop.energies();
        let n = e.len();
        let weights = CMatrix::from_fn(n, n, |k, l| c(lambda) / C64::new(lambda, e[k] - e[l]));
        Self { prop, weights }
    }
}

impl Generator for AveragedEvolution<'_> {
    fn dim(&self) -> usize {
        self.prop.dim()
    }

    fn apply(&self, rho: &CMatrix) -> CMatrix {
        let r = self.prop.to_eigenbasis(rho).component_mul(&self.weights);
        self.prop.from_eigenbasis(&r)
    }
}

/// Interval map of the exact process averaged over the interval length:
/// `ρ_A ↦ Tr_B λ∫e^{-λt} U(t)(ρ_A ⊗ ρ_B)U(t)† dt`.
pub fn exact_averaged_map(sys: &JointSystem, lambda: f64, beta: f64) -> Result<Superoperator> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda must be > 0, got {lambda}")));
    }
    let prop = Propagator::new(&sys.total())?;
    let joint = Superoperator::assemble(&AveragedEvolution::new(&prop, lambda));
    reduce_map(&joint, sys.dims(), &thermal_state(&sys.h_b, beta)?)
}

/// Stationary state of the exact averaged interval map (the long-run mean
/// state at measurement times).
pub fn exact_fixed_point(sys: &JointSystem, lambda: f64, beta: f64) -> Result<SteadyStateResult> {
    let map = exact_averaged_map(sys, lambda, beta)?;
    steady_state(&map.minus_identity(), &sys.h_a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_jcm, JcmParams};

    fn reference_point() -> JointSystem {
        build_jcm(&JcmParams::default()).unwrap()
    }

    fn fock(da: usize, n: usize) -> InitialState {
        InitialState::Pure(StateVector::basis(da, n).unwrap())
    }

    #[test]
    fn exponential_sampling_is_reproducible() {
        let a: Vec<f64> = (0..5).map({
            let mut r = stream_rng(7, 0);
            move |_| sample_interval(&mut r, 2.0).unwrap()
        }).collect();
        let mut r = stream_rng(7, 0);
        let b: Vec<f64> = (0..5).map(|_| sample_interval(&mut r, 2.0).unwrap()).collect();
        assert_eq!(a, b);
        assert!(sample_interval(&mut r, 0.0).is_err());
    }

    #[test]
    fn uncoupled_interval_keeps_populations() {
        let sys = build_jcm(&JcmParams { gamma: 0.0, ..Default::default() }).unwrap();
        let ctx = StepContext::new(&sys).unwrap();
        let rho_a = thermal_state(&sys.h_a, 0.3).unwrap();
        let rho_b = thermal_state(&sys.h_b, 1.0).unwrap();
        let step = density_step(&ctx, &rho_a, &rho_b, 1.0, 13.0).unwrap();
        for (x, y) in rho_a.populations().iter().zip(step.rho_a.populations()) {
            assert!((x - y).abs() < 1e-14);
        }
        for (x, y) in rho_b.populations().iter().zip(&step.outcome_probabilities) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn coherent_reservoir_input_rejected() {
        let sys = reference_point();
        let ctx = StepContext::new(&sys).unwrap();
        let plus = DensityMatrix::new(CMatrix::from_element(2, 2, c(0.5))).unwrap();
        let rho_a = thermal_state(&sys.h_a, 0.3).unwrap();
        assert!(matches!(density_step(&ctx, &rho_a, &plus, 1.0, 1.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn zero_horizon_gives_empty_record() {
        let sys = reference_point();
        let cfg = ProcessConfig::new(0.01, 1.0, 0.0, fock(6, 1));
        let res = run_process(&cfg, &sys).unwrap();
        assert!(res.records[0].ledgers.is_empty());
        assert_eq!(res.series.t, vec![0.0]);
    }

    #[test]
    fn seeds_are_deterministic_across_modes() {
        let sys = reference_point();
        let mut cfg = ProcessConfig::new(0.05, 1.0, 200.0, fock(6, 1));
        cfg.mode = Mode::Trajectory;
        cfg.n_traj = 150;
        cfg.keep_records = true;
        let a = run_process(&cfg, &sys).unwrap();
        let b = run_process(&cfg, &sys).unwrap();
        assert_eq!(a.series, b.series);
        assert_eq!(a.records, b.records);
        cfg.seed = 1;
        let c2 = run_process(&cfg, &sys).unwrap();
        assert_ne!(a.series.mean_ha, c2.series.mean_ha);
    }

    #[test]
    fn invalid_configs_rejected() {
        let sys = reference_point();
        let mut cfg = ProcessConfig::new(0.0, 1.0, 10.0, fock(6, 1));
        assert!(run_process(&cfg, &sys).is_err());
        cfg.lambda = 1.0;
        cfg.n_traj = 0;
        assert!(run_process(&cfg, &sys).is_err());
        cfg.n_traj = 1;
        cfg.initial_state_a = fock(3, 1);
        assert!(run_process(&cfg, &sys).is_err());
    }

    #[test]
    fn fixed_point_of_rwa_resonant_process_is_gibbs() {
        let p = JcmParams { rwa: true, ..Default::default() };
        let sys = build_jcm(&p).unwrap();
        let ss = exact_fixed_point(&sys, 0.01, 1.0).unwrap();
        let gibbs = thermal_state(&sys.h_a, 1.0).unwrap();
        assert!(ss.rho_ss.trace_distance(&gibbs).unwrap() < 1e-9);
    }
}
