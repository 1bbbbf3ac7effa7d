//! Averaged master-equation limits of the measurement process.
//!
//! * weak coupling: second-order expansion of the Poisson-averaged joint
//!   state, split into transition-frequency sectors `V_ω`;
//! * fast measurement: expansion in `1/λ` with a double-commutator
//!   dissipator;
//! * steady states from the null space of an assembled superoperator and the
//!   low-temperature four-level model of the minimum reachable temperature.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::JointSystem;
use crate::qcore::{
    anticommutator, c, commutator, eigh, kron, max_abs, partial_trace_matrix, CMatrix, CVector, DensityMatrix,
    Operator, Subsystem, C64,
};

const I: C64 = C64::new(0.0, 1.0);

// ---------------------------------------------------------------------------
// frequency decomposition

/// Product eigenbasis of `H_A ⊗ I + I ⊗ H_B` and the coupling split into
/// transition-frequency sectors.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub frequencies: Vec<f64>,
    pub v_omega: Vec<CMatrix>,
    /// Unitary whose columns are the product eigenvectors.
    pub basis: CMatrix,
    pub energies: Vec<f64>,
}

/// Default binning tolerance: `1e-9 · max|ω|` over all uncoupled transitions.
pub fn default_tolerance(sys: &JointSystem) -> f64 {
    let (ea, _) = eigh(sys.h_a.matrix());
    let (eb, _) = eigh(sys.h_b.matrix());
    let span = (ea[ea.len() - 1] - ea[0]) + (eb[eb.len() - 1] - eb[0]);
    1e-9 * span.max(1e-300)
}

/// Splits `H_AB` into `V_ω = Σ_{E_n - E_m = ω} |n⟩⟨n|H_AB|m⟩⟨m|` over the
/// uncoupled eigenbasis. Frequencies closer than `tol` share a bin. Empty
/// sectors are dropped, so `H_AB = 0` gives no sectors.
pub fn decompose(sys: &JointSystem, tol: f64) -> Result<Decomposition> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("binning tolerance must be positive".into()));
    }
    let (ea, va) = eigh(sys.h_a.matrix());
    let (eb, vb) = eigh(sys.h_b.matrix());
    let basis = kron(&va, &vb);
    let energies: Vec<f64> = ea.iter().flat_map(|&a| eb.iter().map(move |&b| a + b)).collect();
    let m = basis.adjoint() * sys.h_ab.matrix() * &basis;
    let dim = m.nrows();
    let scale = max_abs(&m);
    let mut diffs: Vec<f64> = Vec::new();
    for i in 0..dim {
        for j in 0..dim {
            if m[(i, j)].norm() > 1e-14 * scale {
                diffs.push(energies[i] - energies[j]);
            }
        }
    }
    diffs.sort_by(f64::total_cmp);
    // single-linkage clusters of the sorted transition frequencies
    let mut clusters: Vec<Vec<f64>> = Vec::new();
    for w in diffs {
        match clusters.last_mut() {
            Some(cl) if w - cl[cl.len() - 1] < tol => cl.push(w),
            _ => clusters.push(vec![w]),
        }
    }
    let bounds: Vec<(f64, f64)> = clusters.iter().map(|cl| (cl[0], cl[cl.len() - 1])).collect();
    let frequencies: Vec<f64> = clusters
        .iter()
        .map(|cl| {
            let (lo, hi) = (cl[0], cl[cl.len() - 1]);
            // midpoint keeps ±ω bins exactly mirrored
            0.5 * (lo + hi)
        })
        .collect();
    let mut v_omega = Vec::with_capacity(frequencies.len());
    for &(lo, hi) in &bounds {
        let masked = CMatrix::from_fn(dim, dim, |i, j| {
            let w = energies[i] - energies[j];
            if w >= lo && w <= hi && m[(i, j)].norm() > 1e-14 * scale {
                m[(i, j)]
            } else {
                C64::new(0.0, 0.0)
            }
        });
        v_omega.push(&basis * masked * basis.adjoint());
    }
    Ok(Decomposition { frequencies, v_omega, basis, energies })
}

/// Frequency sectors together with the Poisson-averaging coefficient tables
/// `d = (λ-iω)(λ+iω′)(λ-i(ω-ω′))`, `s = (2λ-i(ω-ω′))/d`, `a = (ω+ω′)/d`.
#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    pub lambda: f64,
    pub gamma: f64,
    pub dims: (usize, usize),
    pub frequencies: Vec<f64>,
    pub v_omega: Vec<CMatrix>,
    pub s_coef: CMatrix,
    pub a_coef: CMatrix,
    pub d_coef: CMatrix,
    // L′ρ = Σ s V_ω ρ V_ω′† + K ρ + ρ K†
    k_op: CMatrix,
}

impl GeneratorSpec {
    pub fn new(sys: &JointSystem, lambda: f64) -> Result<Self> {
        Self::with_tolerance(sys, lambda, default_tolerance(sys))
    }

    pub fn with_tolerance(sys: &JointSystem, lambda: f64, tol: f64) -> Result<Self> {
        let dec = decompose(sys, tol)?;
        Self::from_decomposition(sys, dec, lambda)
    }

    pub fn from_decomposition(sys: &JointSystem, dec: Decomposition, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda must be > 0, got {lambda}")));
        }
        let nb = dec.frequencies.len();
        let l = c(lambda);
        let mut s_coef = CMatrix::zeros(nb, nb);
        let mut a_coef = CMatrix::zeros(nb, nb);
        let mut d_coef = CMatrix::zeros(nb, nb);
        for (p, &w) in dec.frequencies.iter().enumerate() {
            for (q, &wp) in dec.frequencies.iter().enumerate() {
                let d = (l - I * w) * (l + I * wp) * (l - I * (w - wp));
                d_coef[(p, q)] = d;
                s_coef[(p, q)] = (c(2.0 * lambda) - I * (w - wp)) / d;
                a_coef[(p, q)] = c(w + wp) / d;
            }
        }
        let dim = sys.dim();
        let mut k_op = CMatrix::zeros(dim, dim);
        for p in 0..nb {
            for q in 0..nb {
                let x = dec.v_omega[q].adjoint() * &dec.v_omega[p];
                k_op += x * (-0.5 * s_coef[(p, q)] + 0.5 * I * a_coef[(p, q)]);
            }
        }
        Ok(Self {
            lambda,
            gamma: sys.gamma,
            dims: sys.dims(),
            frequencies: dec.frequencies,
            v_omega: dec.v_omega,
            s_coef,
            a_coef,
            d_coef,
            k_op,
        })
    }

    pub fn joint_dim(&self) -> usize {
        self.dims.0 * self.dims.1
    }

    /// `H̃_AB(λ) = Σ_ω V_ω/(λ - iω)`.
    pub fn h_tilde(&self) -> CMatrix {
        let d = self.joint_dim();
        self.frequencies
            .iter()
            .zip(&self.v_omega)
            .fold(CMatrix::zeros(d, d), |acc, (&w, v)| acc + v * (c(1.0) / (c(self.lambda) - I * w)))
    }

    /// Second-order Poisson-averaged superoperator `L′` (without `γ²`).
    pub fn l_prime(&self, rho: &CMatrix) -> CMatrix {
        let mut out = &self.k_op * rho + rho * self.k_op.adjoint();
        let nb = self.frequencies.len();
        for p in 0..nb {
            let vr = &self.v_omega[p] * rho;
            for q in 0..nb {
                out += &vr * self.v_omega[q].adjoint() * self.s_coef[(p, q)];
            }
        }
        out
    }

    /// Largest violation of `V_ω† = V_{-ω}` and of the conjugate symmetry
    /// of the `s`, `a`, `d` tables.
    pub fn symmetry_deviation(&self) -> f64 {
        let mut worst = 0.0_f64;
        let nb = self.frequencies.len();
        for p in 0..nb {
            let w = self.frequencies[p];
            let partner = self
                .frequencies
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 + w).abs().total_cmp(&(b.1 + w).abs()))
                .map(|(k, _)| k)
                .unwrap_or(p);
            worst = worst.max(max_abs(&(self.v_omega[p].adjoint() - &self.v_omega[partner])));
            for q in 0..nb {
                for t in [&self.s_coef, &self.a_coef, &self.d_coef] {
                    worst = worst.max((t[(p, q)].conj() - t[(q, p)]).norm() / (1.0 + t[(p, q)].norm()));
                }
            }
        }
        worst
    }

    /// Eigenvalues of the Hermitian table `[s_{ω,ω′}]` (jump-rate spectrum of
    /// the canonical Lindblad form).
    pub fn jump_rate_spectrum(&self) -> Vec<f64> {
        if self.frequencies.is_empty() {
            return Vec::new();
        }
        eigh(&self.s_coef).0.iter().copied().collect()
    }
}

// ---------------------------------------------------------------------------
// maps

/// First- and second-order parts of the averaged joint increment `θ - ρ`.
#[derive(Debug, Clone)]
pub struct WeakIncrement {
    /// `-iγ[H̃_AB, ρ]`
    pub first_order: CMatrix,
    /// `γ² L′ρ`
    pub second_order: CMatrix,
}

impl WeakIncrement {
    pub fn total(&self) -> CMatrix {
        &self.first_order + &self.second_order
    }
}

fn check_product(rho: &CMatrix, dims: (usize, usize)) -> Result<()> {
    let ra = partial_trace_matrix(rho, dims, Subsystem::A)?;
    let rb = partial_trace_matrix(rho, dims, Subsystem::B)?;
    let dev = max_abs(&(kron(&ra, &rb) - rho));
    if dev > 1e-10 {
        return Err(Error::Precondition(format!("joint state is not a product state (deviation {dev:e})")));
    }
    Ok(())
}

/// Poisson-averaged weak-coupling increment for a product input state.
pub fn weak_map(spec: &GeneratorSpec, rho_ab0: &DensityMatrix) -> Result<WeakIncrement> {
    if rho_ab0.dim() != spec.joint_dim() {
        return Err(Error::shape(spec.joint_dim(), rho_ab0.dim()));
    }
    check_product(rho_ab0.matrix(), spec.dims)?;
    let rho = rho_ab0.matrix();
    let first_order = commutator(&spec.h_tilde(), rho) * (-I * spec.gamma);
    let second_order = spec.l_prime(rho) * c(spec.gamma * spec.gamma);
    Ok(WeakIncrement { first_order, second_order })
}

/// Terms of the fast-measurement expansion through `O(γ²/λ²)`.
#[derive(Debug, Clone)]
pub struct FastIncrement {
    /// `-(iγ/λ)[H_AB, ρ] + (γ/λ²)[[H_0, H_AB], ρ]`
    pub first_order: CMatrix,
    /// `(γ²/λ²)(2 H_AB ρ H_AB - {H_AB², ρ})`
    pub second_order: CMatrix,
    /// False when `λ < 10γ`, outside the regime where the expansion is meant
    /// to be used.
    pub regime_ok: bool,
}

impl FastIncrement {
    pub fn total(&self) -> CMatrix {
        &self.first_order + &self.second_order
    }
}

pub fn fast_map(sys: &JointSystem, rho_ab0: &DensityMatrix, lambda: f64) -> Result<FastIncrement> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda must be > 0, got {lambda}")));
    }
    if rho_ab0.dim() != sys.dim() {
        return Err(Error::shape(sys.dim(), rho_ab0.dim()));
    }
    let h = sys.h_ab.matrix();
    let rho = rho_ab0.matrix();
    let g = sys.gamma;
    let first_order = commutator(h, rho) * (-I * (g / lambda))
        + commutator(&commutator(&sys.h0(), h), rho) * c(g / (lambda * lambda));
    let second_order = (h * rho * h * c(2.0) - anticommutator(&(h * h), rho)) * c(g * g / (lambda * lambda));
    Ok(FastIncrement { first_order, second_order, regime_ok: lambda >= 10.0 * g })
}

// ---------------------------------------------------------------------------
// generators and superoperators

/// A linear map on operators of one fixed dimension.
pub trait Generator {
    fn dim(&self) -> usize;
    fn apply(&self, rho: &CMatrix) -> CMatrix;
}

/// Column-stacked matrix representation of a linear map on `dim × dim`
/// operators: `vec(L(ρ)) = M vec(ρ)`.
#[derive(Debug, Clone)]
pub struct Superoperator {
    pub dim: usize,
    pub matrix: CMatrix,
}

impl Superoperator {
    pub fn assemble(g: &dyn Generator) -> Self {
        let d = g.dim();
        let mut matrix = CMatrix::zeros(d * d, d * d);
        for j in 0..d {
            for i in 0..d {
                let mut e = CMatrix::zeros(d, d);
                e[(i, j)] = c(1.0);
                let out = g.apply(&e);
                matrix.column_mut(i + j * d).copy_from_slice(out.as_slice());
            }
        }
        Self { dim: d, matrix }
    }

    pub fn apply(&self, rho: &CMatrix) -> CMatrix {
        let v = CVector::from_column_slice(rho.as_slice());
        let out = &self.matrix * v;
        CMatrix::from_column_slice(self.dim, self.dim, out.as_slice())
    }

    /// `M - I`, whose null space is the fixed point of a map.
    pub fn minus_identity(&self) -> Self {
        let n = self.matrix.nrows();
        Self { dim: self.dim, matrix: &self.matrix - CMatrix::identity(n, n) }
    }
}

impl Generator for Superoperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, rho: &CMatrix) -> CMatrix {
        Superoperator::apply(self, rho)
    }
}

/// Joint-space weak-coupling generator `-i[H_0, ρ] + γ²λ L′ρ`.
pub struct WeakJointGenerator<'a> {
    spec: &'a GeneratorSpec,
    h0: CMatrix,
}

impl<'a> WeakJointGenerator<'a> {
    pub fn new(spec: &'a GeneratorSpec, sys: &JointSystem) -> Self {
        Self { spec, h0: sys.h0() }
    }
}

impl Generator for WeakJointGenerator<'_> {
    fn dim(&self) -> usize {
        self.spec.joint_dim()
    }

    fn apply(&self, rho: &CMatrix) -> CMatrix {
        let rate = self.spec.gamma * self.spec.gamma * self.spec.lambda;
        commutator(&self.h0, rho) * (-I) + self.spec.l_prime(rho) * c(rate)
    }
}

/// Reduced weak-coupling generator
/// `L_A ρ_A = -i[H_A, ρ_A] + γ²λ Tr_B L′[ρ_A ⊗ ρ_B]`.
pub struct WeakGenerator<'a> {
    spec: &'a GeneratorSpec,
    h_a: CMatrix,
    rho_b: CMatrix,
}

impl<'a> WeakGenerator<'a> {
    pub fn new(spec: &'a GeneratorSpec, sys: &JointSystem, rho_b: &DensityMatrix) -> Result<Self> {
        if rho_b.dim() != spec.dims.1 {
            return Err(Error::shape(spec.dims.1, rho_b.dim()));
        }
        Ok(Self { spec, h_a: sys.h_a.matrix().clone(), rho_b: rho_b.matrix().clone() })
    }
}

impl Generator for WeakGenerator<'_> {
    fn dim(&self) -> usize {
        self.spec.dims.0
    }

    fn apply(&self, rho: &CMatrix) -> CMatrix {
        let rate = self.spec.gamma * self.spec.gamma * self.spec.lambda;
        let joint = kron(rho, &self.rho_b);
        let diss = partial_trace_matrix(&self.spec.l_prime(&joint), self.spec.dims, Subsystem::A)
            .expect("dimensions fixed at construction");
        commutator(&self.h_a, rho) * (-I) + diss * c(rate)
    }
}

/// Joint-space fast-measurement generator
/// `-i[H_0, ρ] + (γ²/λ)(2HρH - {H², ρ})`, `H = H_AB`.
pub struct FastJointGenerator {
    h0: CMatrix,
    h: CMatrix,
    h2: CMatrix,
    rate: f64,
}

impl FastJointGenerator {
    pub fn new(sys: &JointSystem, lambda: f64) -> Self {
        let h = sys.h_ab.matrix().clone();
        Self { h0: sys.h0(), h2: &h * &h, h, rate: sys.gamma * sys.gamma / lambda }
    }
}

impl Generator for FastJointGenerator {
    fn dim(&self) -> usize {
        self.h.nrows()
    }

    fn apply(&self, rho: &CMatrix) -> CMatrix {
        commutator(&self.h0, rho) * (-I)
            + (&self.h * rho * &self.h * c(2.0) - anticommutator(&self.h2, rho)) * c(self.rate)
    }
}

/// Reduced fast-measurement generator, written with the sub-matrices
/// `[V^{nm}]_{ij} = [H_AB]_{in,jm}` taken in the reservoir energy basis.
pub struct FastGenerator {
    h_a: CMatrix,
    // (weight p_m, V^{nm}) for every reservoir pair
    jumps: Vec<(f64, CMatrix)>,
    // Σ_m p_m (H_AB²)^{mm}
    drain: CMatrix,
    rate: f64,
}

impl FastGenerator {
    pub fn new(sys: &JointSystem, lambda: f64, rho_b: &DensityMatrix) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda must be > 0, got {lambda}")));
        }
        let (da, db) = sys.dims();
        let (_, vb) = eigh(sys.h_b.matrix());
        let p = reservoir_populations(rho_b, &vb)?;
        let u = kron(&CMatrix::identity(da, da), &vb);
        let h = u.adjoint() * sys.h_ab.matrix() * &u;
        let h2 = &h * &h;
        let block = |m: &CMatrix, n: usize, k: usize| CMatrix::from_fn(da, da, |i, j| m[(i * db + n, j * db + k)]);
        let mut jumps = Vec::new();
        let mut drain = CMatrix::zeros(da, da);
        for m in 0..db {
            if p[m] == 0.0 {
                continue;
            }
            drain += block(&h2, m, m) * c(p[m]);
            for n in 0..db {
                let v = block(&h, n, m);
                if max_abs(&v) > 0.0 {
                    jumps.push((p[m], v));
                }
            }
        }
        Ok(Self { h_a: sys.h_a.matrix().clone(), jumps, drain, rate: sys.gamma * sys.gamma / lambda })
    }
}

impl Generator for FastGenerator {
    fn dim(&self) -> usize {
        self.h_a.nrows()
    }

    fn apply(&self, rho: &CMatrix) -> CMatrix {
        let mut diss = anticommutator(&self.drain, rho) * c(-1.0);
        for (p, v) in &self.jumps {
            diss += v * rho * v.adjoint() * c(2.0 * p);
        }
        commutator(&self.h_a, rho) * (-I) + diss * c(self.rate)
    }
}

/// Populations of `rho_b` in the basis given by the columns of `vb`; fails if
/// `rho_b` carries coherences in that basis.
fn reservoir_populations(rho_b: &DensityMatrix, vb: &CMatrix) -> Result<Vec<f64>> {
    let r = vb.adjoint() * rho_b.matrix() * vb;
    let n = r.nrows();
    for i in 0..n {
        for j in 0..n {
            if i != j && r[(i, j)].norm() > 1e-10 {
                return Err(Error::Precondition("reservoir state must be diagonal in its energy basis".into()));
            }
        }
    }
    Ok((0..n).map(|i| r[(i, i)].re.max(0.0)).collect())
}

/// Reduced map `ρ_A ↦ Tr_B[M(ρ_A ⊗ ρ_B)]` of a joint superoperator.
pub fn reduce_map(joint: &Superoperator, dims: (usize, usize), rho_b: &DensityMatrix) -> Result<Superoperator> {
    struct Reduced<'a> {
        joint: &'a Superoperator,
        dims: (usize, usize),
        rho_b: &'a CMatrix,
    }
    impl Generator for Reduced<'_> {
        fn dim(&self) -> usize {
            self.dims.0
        }
        fn apply(&self, rho: &CMatrix) -> CMatrix {
            let out = self.joint.apply(&kron(rho, self.rho_b));
            partial_trace_matrix(&out, self.dims, Subsystem::A).expect("fixed dimensions")
        }
    }
    if joint.dim != dims.0 * dims.1 {
        return Err(Error::shape(dims.0 * dims.1, joint.dim));
    }
    if rho_b.dim() != dims.1 {
        return Err(Error::shape(dims.1, rho_b.dim()));
    }
    Ok(Superoperator::assemble(&Reduced { joint, dims, rho_b: rho_b.matrix() }))
}

/// Poisson average of the interval-plus-purification protocol under a joint
/// generator: `ρ_A ↦ Tr_B[λ(λ - G)^{-1}(ρ_A ⊗ ρ_B)]`.
pub fn averaged_interval_map(
    g: &Superoperator,
    lambda: f64,
    dims: (usize, usize),
    rho_b: &DensityMatrix,
) -> Result<Superoperator> {
    let n = g.matrix.nrows();
    let m = CMatrix::identity(n, n) * c(lambda) - &g.matrix;
    let inv = m.try_inverse().ok_or_else(|| Error::Precondition("λ - G is singular".into()))?;
    let resolvent = Superoperator { dim: g.dim, matrix: inv * c(lambda) };
    reduce_map(&resolvent, dims, rho_b)
}

// ---------------------------------------------------------------------------
// steady states

#[derive(Debug, Clone, Serialize)]
pub struct SteadyStateResult {
    #[serde(skip)]
    pub rho_ss: DensityMatrix,
    pub p0: f64,
    pub p1: f64,
    pub beta_eff: f64,
    pub residual: f64,
}

/// Normalized null vector of `sop` (smallest singular value), interpreted as
/// a density matrix. Populations `p0`, `p1` are taken in the eigenbasis of
/// `h_a` and `β_eff = -ln(p1/p0)/(E_1 - E_0)`.
pub fn steady_state(sop: &Superoperator, h_a: &Operator) -> Result<SteadyStateResult> {
    let d = sop.dim;
    if h_a.dim() != d {
        return Err(Error::shape(d, h_a.dim()));
    }
    let svd = sop.matrix.clone().svd(false, true);
    let sv = &svd.singular_values;
    let v_t = svd.v_t.as_ref().expect("requested right singular vectors");
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let threshold = (1e-9 * smax).max(f64::MIN_POSITIVE);
    let null_dim = sv.iter().filter(|&&s| s <= threshold).count();
    if null_dim > 1 || smax == 0.0 {
        return Err(Error::Ambiguous { dim: null_dim.max(1) });
    }
    let kmin = (0..sv.len()).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).expect("non-empty");
    let v: CVector = v_t.row(kmin).adjoint();
    let mut m = CMatrix::from_column_slice(d, d, v.as_slice());
    let tr = m.trace();
    if tr.norm() < 1e-12 {
        return Err(Error::Precondition("null vector is traceless; no stationary state".into()));
    }
    m /= tr;
    let rho = DensityMatrix::new(crate::qcore::hermitian_part(&m))?;
    let residual = Superoperator::apply(sop, rho.matrix()).norm();
    if residual >= 1e-9 {
        return Err(Error::Precondition(format!("steady-state residual {residual:e} too large")));
    }
    let (e, va) = eigh(h_a.matrix());
    let rotated = va.adjoint() * rho.matrix() * &va;
    let p0 = rotated[(0, 0)].re;
    let p1 = if d > 1 { rotated[(1, 1)].re } else { 0.0 };
    let beta_eff = if d > 1 { -(p1 / p0).ln() / (e[1] - e[0]) } else { f64::NAN };
    Ok(SteadyStateResult { rho_ss: rho, p0, p1, beta_eff, residual })
}

/// Low-temperature limit of the steady ratio:
/// `p1/p0 = (λ/2ω)²/((λ/2ω)² + 1)`.
pub fn min_temp_predict(lambda: f64, omega: f64) -> Result<f64> {
    if !(lambda > 0.0) || !(omega > 0.0) {
        return Err(Error::InvalidParameter("lambda and omega must be positive".into()));
    }
    let x2 = (lambda / (2.0 * omega)).powi(2);
    Ok(x2 / (x2 + 1.0))
}

/// `β_eff` of the low-temperature plateau, `-ln(ratio)/ω`.
pub fn min_temp_beta(lambda: f64, omega: f64) -> Result<f64> {
    Ok(-min_temp_predict(lambda, omega)?.ln() / omega)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FourStateRate {
    pub dha_dt: f64,
    pub steady_ratio: f64,
}

/// Four-level (`p_{0/1}σ_{g/e}`) model with resonant exchange and
/// simultaneous excitation at equal weight.
pub fn four_state_rate(
    lambda: f64,
    omega: f64,
    gamma: f64,
    sigma_e: f64,
    sigma_g: f64,
    p0: f64,
    p1: f64,
) -> Result<FourStateRate> {
    if !(lambda > 0.0) || !(omega > 0.0) {
        return Err(Error::InvalidParameter("lambda and omega must be positive".into()));
    }
    let x2 = (lambda / (2.0 * omega)).powi(2);
    let pref = 2.0 * (omega / lambda) * gamma * gamma / (x2 + 1.0);
    Ok(FourStateRate {
        dha_dt: pref * (x2 * (p0 - p1) + sigma_e * p0 - sigma_g * p1),
        steady_ratio: (x2 + sigma_e) / (x2 + sigma_g),
    })
}

/// Mean number of simultaneous atom-and-cavity excitations per interval at
/// resonance: `2γ²/(λ² + 4ω²) (σ_g⟨n+1⟩ - σ_e⟨n⟩)`.
pub fn simultaneous_excitations(lambda: f64, omega: f64, gamma: f64, sigma_e: f64, sigma_g: f64, mean_n: f64) -> f64 {
    2.0 * gamma * gamma / (lambda * lambda + 4.0 * omega * omega) * (sigma_g * (mean_n + 1.0) - sigma_e * mean_n)
}

// ---------------------------------------------------------------------------
// propagation

/// Matrix exponential `e^{Gτ}` of a joint superoperator applied to vectors,
/// via cached binary powers of `e^{Gh}`. Each cached power is corrected to
/// preserve the trace exactly.
#[derive(Debug, Clone)]
pub struct SemigroupCache {
    g: CMatrix,
    h: f64,
    powers: Vec<CMatrix>,
    trace_row: CMatrix,
}

impl SemigroupCache {
    pub fn new(g: &Superoperator) -> Self {
        let norm1 = (0..g.matrix.ncols())
            .map(|j| g.matrix.column(j).iter().map(|z| z.norm()).sum::<f64>())
            .fold(0.0_f64, f64::max);
        let h = if norm1 > 0.0 { 1.0 / norm1 } else { 1.0 };
        let d = g.dim;
        let trace_row = CMatrix::from_fn(1, d * d, |_, k| if k % (d + 1) == 0 { c(1.0) } else { C64::new(0.0, 0.0) });
        let mut cache = Self { g: g.matrix.clone(), h, powers: Vec::new(), trace_row };
        let base = (&g.matrix * c(h)).exp();
        let base = cache.fix_trace(base);
        cache.powers.push(base);
        cache
    }

    fn fix_trace(&self, p: CMatrix) -> CMatrix {
        // P + w (w† - w†P)/|w|²: makes the trace functional exactly invariant
        let w = &self.trace_row;
        let defect = w - w * &p;
        let norm2 = w.iter().map(|z| z.norm_sqr()).sum::<f64>();
        p + w.adjoint() * defect * c(1.0 / norm2)
    }

    fn power(&mut self, k: usize) -> &CMatrix {
        while self.powers.len() <= k {
            let last = self.powers.last().expect("base power");
            let next = self.fix_trace(last * last);
            self.powers.push(next);
        }
        &self.powers[k]
    }

    /// Builds every cached power needed for intervals up to `tau_max`, so
    /// that clones share the work.
    pub fn prepare(&mut self, tau_max: f64) {
        let steps = (tau_max / self.h).floor();
        if steps >= 1.0 {
            let top = (steps.log2().floor() as usize).min(62);
            self.power(top);
        }
    }

    /// `e^{Gτ} v`.
    pub fn apply(&mut self, tau: f64, v: &CVector) -> CVector {
        let steps = (tau / self.h).floor();
        let rem = tau - steps * self.h;
        // remainder by a Taylor series; |G·rem| ≤ 1
        let mut out = v.clone();
        let mut term = v.clone();
        for k in 1..=30 {
            term = &self.g * term * c(rem / k as f64);
            out += &term;
            if term.norm() <= 1e-18 * out.norm() {
                break;
            }
        }
        let mut m = steps as u64;
        let mut bit = 0;
        while m > 0 {
            if m & 1 == 1 {
                out = self.power(bit) * out;
            }
            m >>= 1;
            bit += 1;
        }
        out
    }

    pub fn apply_matrix(&mut self, tau: f64, rho: &CMatrix) -> CMatrix {
        let d = rho.nrows();
        let v = self.apply(tau, &CVector::from_column_slice(rho.as_slice()));
        crate::qcore::hermitian_part(&CMatrix::from_column_slice(d, d, v.as_slice()))
    }
}

/// How the reduced dynamics is advanced.
#[derive(Debug, Clone, PartialEq)]
pub enum Protocol {
    /// Integrate the reduced generator continuously.
    Continuous,
    /// Propagate the joint state under the averaged joint generator for each
    /// interval, then trace out the reservoir and replace it.
    IntervalPurify { intervals: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct PropagationResult {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
    pub measurement_times: Vec<f64>,
    pub measurement_states: Vec<DensityMatrix>,
    pub min_eigenvalue: f64,
    pub max_trace_error: f64,
}

const POSITIVITY_LIMIT: f64 = 1e-7;

fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || t_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameter("time grid must be finite, non-negative and sorted".into()));
    }
    Ok(())
}

struct Monitor {
    min_eigenvalue: f64,
    max_trace_error: f64,
}

impl Monitor {
    fn new() -> Self {
        Self { min_eigenvalue: f64::INFINITY, max_trace_error: 0.0 }
    }

    fn accept(&mut self, m: CMatrix) -> Result<DensityMatrix> {
        let h = crate::qcore::hermitian_part(&m);
        let tr = h.trace().re;
        self.max_trace_error = self.max_trace_error.max((tr - 1.0).abs());
        let min = eigh(&h).0[0];
        self.min_eigenvalue = self.min_eigenvalue.min(min);
        if min < -POSITIVITY_LIMIT {
            return Err(Error::StepSize(format!("positivity violated: eigenvalue {min:e}")));
        }
        if (tr - 1.0).abs() > 1e-6 {
            return Err(Error::StepSize(format!("trace drifted to {tr}")));
        }
        Ok(crate::qcore::DensityMatrix::from_matrix_unchecked(h))
    }
}

/// Weak-coupling propagation of `ρ_A` on `t_grid`.
pub fn lindblad_propagate(
    spec: &GeneratorSpec,
    sys: &JointSystem,
    rho_a0: &DensityMatrix,
    rho_b0: &DensityMatrix,
    t_grid: &[f64],
    protocol: &Protocol,
) -> Result<PropagationResult> {
    match protocol {
        Protocol::Continuous => {
            let g = WeakGenerator::new(spec, sys, rho_b0)?;
            propagate_continuous(&g, rho_a0, t_grid)
        }
        Protocol::IntervalPurify { intervals } => {
            let joint = Superoperator::assemble(&WeakJointGenerator::new(spec, sys));
            propagate_intervals(&joint, sys.dims(), rho_a0, rho_b0, t_grid, intervals)
        }
    }
}

/// Fast-measurement propagation of `ρ_A` on `t_grid`.
pub fn fast_propagate(
    sys: &JointSystem,
    lambda: f64,
    rho_a0: &DensityMatrix,
    rho_b0: &DensityMatrix,
    t_grid: &[f64],
    protocol: &Protocol,
) -> Result<PropagationResult> {
    match protocol {
        Protocol::Continuous => {
            let g = FastGenerator::new(sys, lambda, rho_b0)?;
            propagate_continuous(&g, rho_a0, t_grid)
        }
        Protocol::IntervalPurify { intervals } => {
            let joint = Superoperator::assemble(&FastJointGenerator::new(sys, lambda));
            propagate_intervals(&joint, sys.dims(), rho_a0, rho_b0, t_grid, intervals)
        }
    }
}

/// Interval-plus-purification propagation under an arbitrary joint
/// generator. Grid points inside an interval report the reduced state as if
/// the interval ended there.
pub fn propagate_intervals(
    joint: &Superoperator,
    dims: (usize, usize),
    rho_a0: &DensityMatrix,
    rho_b0: &DensityMatrix,
    t_grid: &[f64],
    intervals: &[f64],
) -> Result<PropagationResult> {
    check_grid(t_grid)?;
    if rho_a0.dim() != dims.0 || rho_b0.dim() != dims.1 || joint.dim != dims.0 * dims.1 {
        return Err(Error::shape(format!("{}x{}", dims.0, dims.1), format!("{}x{}", rho_a0.dim(), rho_b0.dim())));
    }
    if intervals.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidParameter("intervals must be positive".into()));
    }
    let mut cache = SemigroupCache::new(joint);
    propagate_intervals_cached(&mut cache, dims, rho_a0, rho_b0, t_grid, intervals)
}

/// [`propagate_intervals`] with a prebuilt semigroup cache, for repeated
/// runs under the same generator.
pub fn propagate_intervals_cached(
    cache: &mut SemigroupCache,
    dims: (usize, usize),
    rho_a0: &DensityMatrix,
    rho_b0: &DensityMatrix,
    t_grid: &[f64],
    intervals: &[f64],
) -> Result<PropagationResult> {
    check_grid(t_grid)?;
    let n = dims.0 * dims.1;
    if rho_a0.dim() != dims.0 || rho_b0.dim() != dims.1 || cache.g.nrows() != n * n {
        return Err(Error::shape(format!("{}x{}", dims.0, dims.1), format!("{}x{}", rho_a0.dim(), rho_b0.dim())));
    }
    if intervals.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidParameter("intervals must be positive".into()));
    }
    let horizon = t_grid.last().copied().unwrap_or(0.0);
    let mut mon = Monitor::new();
    let reduce = |m: &CMatrix| partial_trace_matrix(m, dims, Subsystem::A).expect("fixed dimensions");
    let mut res = PropagationResult {
        times: Vec::with_capacity(t_grid.len()),
        states: Vec::with_capacity(t_grid.len()),
        measurement_times: vec![0.0],
        measurement_states: vec![rho_a0.clone()],
        min_eigenvalue: f64::INFINITY,
        max_trace_error: 0.0,
    };
    let mut rho_a = rho_a0.matrix().clone();
    let mut t_start = 0.0;
    let mut next = 0;
    let mut k = 0;
    loop {
        let joint0 = kron(&rho_a, rho_b0.matrix());
        let len = if k < intervals.len() { intervals[k] } else { f64::INFINITY };
        let t_end = t_start + len;
        while next < t_grid.len() && t_grid[next] < t_end {
            let tau = t_grid[next] - t_start;
            let state = mon.accept(reduce(&cache.apply_matrix(tau, &joint0)))?;
            res.times.push(t_grid[next]);
            res.states.push(state);
            next += 1;
        }
        if next >= t_grid.len() && t_end > horizon {
            break;
        }
        if !len.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "interval list ({} entries) ends before the last grid time {horizon}",
                intervals.len()
            )));
        }
        let after = mon.accept(reduce(&cache.apply_matrix(len, &joint0)))?;
        rho_a = after.matrix().clone();
        res.measurement_times.push(t_end);
        res.measurement_states.push(after);
        t_start = t_end;
        k += 1;
    }
    res.min_eigenvalue = mon.min_eigenvalue;
    res.max_trace_error = mon.max_trace_error;
    Ok(res)
}

// Dormand-Prince 5(4) tableau
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Local error allowed per unit of simulated time.
pub const CONTINUOUS_TOLERANCE: f64 = 1e-10;

/// Adaptive Dormand-Prince integration of `dρ/dt = L ρ` with local error
/// at most `1e-10` per unit time.
pub fn propagate_continuous(g: &dyn Generator, rho0: &DensityMatrix, t_grid: &[f64]) -> Result<PropagationResult> {
    check_grid(t_grid)?;
    if rho0.dim() != g.dim() {
        return Err(Error::shape(g.dim(), rho0.dim()));
    }
    let mut mon = Monitor::new();
    let mut res = PropagationResult {
        times: Vec::with_capacity(t_grid.len()),
        states: Vec::with_capacity(t_grid.len()),
        measurement_times: Vec::new(),
        measurement_states: Vec::new(),
        min_eigenvalue: f64::INFINITY,
        max_trace_error: 0.0,
    };
    let mut y = rho0.matrix().clone();
    let mut t = 0.0;
    let mut h: f64 = 1e-2;
    let mut k1 = g.apply(&y);
    for &target in t_grid {
        while t < target {
            let step = h.min(target - t);
            let mut ks: Vec<CMatrix> = Vec::with_capacity(7);
            ks.push(k1.clone());
            for s in 1..7 {
                let mut yi = y.clone();
                for (j, kj) in ks.iter().enumerate() {
                    if DP_A[s][j] != 0.0 {
                        yi += kj * c(step * DP_A[s][j]);
                    }
                }
                ks.push(g.apply(&yi));
            }
            let mut y5 = y.clone();
            let mut err = CMatrix::zeros(y.nrows(), y.ncols());
            for j in 0..7 {
                y5 += &ks[j] * c(step * DP_B5[j]);
                err += &ks[j] * c(step * (DP_B5[j] - DP_B4[j]));
            }
            let e = max_abs(&err);
            let allowed = CONTINUOUS_TOLERANCE * step;
            if e <= allowed || step < 1e-12 {
                t += step;
                y = y5;
                k1 = ks.pop().expect("seven stages");
                if step < 1e-12 && e > allowed {
                    return Err(Error::StepSize("step size underflow".into()));
                }
            }
            let factor = if e == 0.0 { 5.0 } else { (0.9 * (allowed / e).powf(0.25)).clamp(0.2, 5.0) };
            h = (step * factor).max(1e-12);
        }
        res.times.push(target);
        res.states.push(mon.accept(y.clone())?);
    }
    res.min_eigenvalue = mon.min_eigenvalue;
    res.max_trace_error = mon.max_trace_error;
    Ok(res)
}

/// Poisson-averaged interaction-picture joint state, computed exactly from
/// the eigen-decomposition of the full Hamiltonian. Independent of the
/// perturbative formulas; used to check them.
pub fn exact_interaction_average(sys: &JointSystem, lambda: f64, rho: &CMatrix) -> CMatrix {
    let (ea, va) = eigh(sys.h_a.matrix());
    let (eb, vb) = eigh(sys.h_b.matrix());
    let u0 = kron(&va, &vb);
    let e0: Vec<f64> = ea.iter().flat_map(|&a| eb.iter().map(move |&b| a + b)).collect();
    let (e, v) = eigh(sys.total().matrix());
    let d = e.len();
    // W = U0† V maps H-eigenbasis to product basis
    let w = u0.adjoint() * &v;
    let r = v.adjoint() * rho * &v;
    let mut out = CMatrix::zeros(d, d);
    for k in 0..d {
        for l in 0..d {
            let rkl = r[(k, l)];
            if rkl.norm() == 0.0 {
                continue;
            }
            for a in 0..d {
                let wak = w[(a, k)] * rkl;
                for b in 0..d {
                    let freq = e[k] - e[l] - e0[a] + e0[b];
                    out[(a, b)] += wak * w[(b, l)].conj() * (c(lambda) / (c(lambda) + I * freq));
                }
            }
        }
    }
    &u0 * out * u0.adjoint()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{annihilation, build_jcm, thermal_state, JcmParams};

    fn jcm(rwa: bool, omega_b: f64, gamma: f64, n_max: usize) -> JointSystem {
        build_jcm(&JcmParams { omega_a: 2.0 * std::f64::consts::PI, omega_b, gamma, n_max, rwa }).unwrap()
    }

    fn number(dim: usize) -> CMatrix {
        let a = annihilation(dim);
        a.adjoint() * a
    }

    fn fock(dim: usize, n: usize) -> DensityMatrix {
        let mut p = vec![0.0; dim];
        p[n] = 1.0;
        DensityMatrix::diagonal(&p).unwrap()
    }

    #[test]
    fn rwa_decomposition_has_one_pair() {
        let sys = jcm(true, 2.0 * std::f64::consts::PI + 0.5, 0.05, 4);
        let spec = GeneratorSpec::new(&sys, 0.1).unwrap();
        let mut f = spec.frequencies.clone();
        f.sort_by(f64::total_cmp);
        assert_eq!(f.len(), 2);
        assert!((f[0] + 0.5).abs() < 1e-9 && (f[1] - 0.5).abs() < 1e-9);
        // V_{Δ} = a ⊗ σ+
        let k = spec.frequencies.iter().position(|w| *w > 0.0).unwrap();
        let sigma_plus = CMatrix::from_fn(2, 2, |i, j| if i == 1 && j == 0 { c(1.0) } else { c(0.0) });
        let want = kron(&annihilation(5), &sigma_plus);
        assert!(max_abs(&(&spec.v_omega[k] - want)) < 1e-10);
        let sum = spec.v_omega.iter().fold(CMatrix::zeros(10, 10), |a, v| a + v);
        assert!(max_abs(&(sum - sys.h_ab.matrix())) < 1e-10);
        assert!(spec.symmetry_deviation() < 1e-12);
    }

    #[test]
    fn full_rabi_resonance_frequencies() {
        let w = 2.0 * std::f64::consts::PI;
        let sys = jcm(false, w, 0.05, 5);
        let dec = decompose(&sys, default_tolerance(&sys)).unwrap();
        let mut f = dec.frequencies.clone();
        f.sort_by(f64::total_cmp);
        assert_eq!(f.len(), 3);
        assert!((f[0] + 2.0 * w).abs() < 1e-9 && f[1].abs() < 1e-9 && (f[2] - 2.0 * w).abs() < 1e-9);
        let spec = GeneratorSpec::new(&sys, 0.3).unwrap();
        assert!(spec.symmetry_deviation() < 1e-12);
        assert_eq!(spec.jump_rate_spectrum().len(), 3);
    }

    #[test]
    fn zero_coupling_gives_empty_spec() {
        let sys = jcm(false, 1.0, 0.05, 3);
        let zero = Operator::zeros(sys.dim());
        let sys = JointSystem::new(sys.h_a.clone(), sys.h_b.clone(), zero, 0.05).unwrap();
        let spec = GeneratorSpec::new(&sys, 1.0).unwrap();
        assert!(spec.frequencies.is_empty());
        let rho = kron(fock(4, 1).matrix(), fock(2, 0).matrix());
        assert_eq!(max_abs(&spec.l_prime(&rho)), 0.0);
    }

    #[test]
    fn weak_map_properties() {
        let sys = jcm(false, 7.0, 0.05, 3);
        let spec = GeneratorSpec::new(&sys, 0.2).unwrap();
        let rho_a = thermal_state(&sys.h_a, 0.4).unwrap();
        let rho_b = thermal_state(&sys.h_b, 0.7).unwrap();
        let joint = DensityMatrix::new(kron(rho_a.matrix(), rho_b.matrix())).unwrap();
        let inc = weak_map(&spec, &joint).unwrap();
        assert!(inc.total().trace().norm() < 1e-10);
        let herm = crate::qcore::hermiticity_deviation(&(joint.matrix() + inc.total()));
        assert!(herm < 1e-10);
        // second order scales as γ²
        let spec2 = GeneratorSpec::new(&sys.with_gamma(0.1), 0.2).unwrap();
        let inc2 = weak_map(&spec2, &joint).unwrap();
        assert!(max_abs(&(inc2.second_order - inc.second_order * c(4.0))) < 1e-12);
        // entangled input rejected
        let bell = crate::qcore::StateVector::normalized(CVector::from_fn(8, |i, _| {
            if i == 0 || i == 3 { c(1.0) } else { c(0.0) }
        }))
        .unwrap();
        assert!(matches!(weak_map(&spec, &bell.to_density()), Err(Error::Precondition(_))));
    }

    #[test]
    fn weak_map_matches_exact_average_to_second_order() {
        let sys = jcm(false, 5.0, 1.0, 3);
        let lambda = 0.7;
        let rho_a = thermal_state(&sys.h_a, 0.3).unwrap();
        let rho_b = thermal_state(&sys.h_b, 0.5).unwrap();
        let rho = kron(rho_a.matrix(), rho_b.matrix());
        let err = |g: f64| {
            let s = sys.with_gamma(g);
            let spec = GeneratorSpec::new(&s, lambda).unwrap();
            let inc = weak_map(&spec, &DensityMatrix::new(rho.clone()).unwrap()).unwrap();
            let exact = exact_interaction_average(&s, lambda, &rho);
            (max_abs(&(exact - &rho - inc.total())), max_abs(&inc.second_order))
        };
        let (e1, s1) = err(1e-3);
        let (e2, _) = err(2e-3);
        assert!(e1 < 1e-2 * s1, "residual {e1:e} vs second order {s1:e}");
        // residual is at least third order
        assert!(e2 / e1 > 6.0, "ratio {}", e2 / e1);
    }

    #[test]
    fn weak_rate_matches_einstein_rate() {
        let w = 2.0 * std::f64::consts::PI;
        for (detuning, lambda) in [(0.0, 0.01), (0.5, 0.05), (0.5, 1.0)] {
            let p = JcmParams { omega_a: w, omega_b: w + detuning, gamma: 0.01, n_max: 5, rwa: true };
            let sys = build_jcm(&p).unwrap();
            let spec = GeneratorSpec::new(&sys, lambda).unwrap();
            let rho_b = thermal_state(&sys.h_b, 1.0).unwrap();
            let g = WeakGenerator::new(&spec, &sys, &rho_b).unwrap();
            let rho_a = thermal_state(&sys.h_a, 0.5).unwrap();
            let dn = trace_product(&number(6), &g.apply(rho_a.matrix()));
            let pops = rho_a.populations();
            let state = crate::analytic::AtomFieldState::thermal_atom(pops, sys_omega_b(&p), 1.0).unwrap();
            let want = crate::analytic::einstein_rate(&state, lambda, &p).unwrap();
            // the top level has no partner, so compare on the retained ladder
            let top = 6.0 * rho_a.populations()[5] * state.sigma_e;
            let want = want + 2.0 * lambda * p.gamma * p.gamma / (lambda * lambda + detuning * detuning) * top;
            assert!((-dn - want).abs() < 1e-10 * want.abs().max(1e-6), "{detuning} {lambda}: {} vs {want}", -dn);
        }
    }

    fn sys_omega_b(p: &JcmParams) -> f64 {
        p.omega_b
    }

    fn trace_product(a: &CMatrix, b: &CMatrix) -> f64 {
        crate::qcore::trace_product_re(a, b)
    }

    #[test]
    fn van_hove_rates_obey_detailed_balance() {
        let w = 2.0 * std::f64::consts::PI;
        let sys = jcm(true, w, 0.01, 5);
        let spec = GeneratorSpec::new(&sys, 0.04).unwrap();
        let beta = 1.0;
        let rho_b = thermal_state(&sys.h_b, beta).unwrap();
        let g = WeakGenerator::new(&spec, &sys, &rho_b).unwrap();
        let e: Vec<f64> = (0..6).map(|n| w * (n as f64 + 0.5)).collect();
        for n in 0..5 {
            let up = g.apply(fock(6, n).matrix())[(n + 1, n + 1)].re;
            let down = g.apply(fock(6, n + 1).matrix())[(n, n)].re;
            let lhs = (-beta * e[n]).exp() * up;
            let rhs = (-beta * e[n + 1]).exp() * down;
            assert!((lhs - rhs).abs() < 1e-8 * lhs.abs().max(1e-300) + 1e-18, "{n}: {lhs} {rhs}");
        }
    }

    #[test]
    fn van_hove_steady_state_is_gibbs() {
        let w = 2.0 * std::f64::consts::PI;
        let sys = jcm(true, w, 0.01, 5);
        let spec = GeneratorSpec::new(&sys, 0.004).unwrap();
        let rho_b = thermal_state(&sys.h_b, 1.0).unwrap();
        let g = WeakGenerator::new(&spec, &sys, &rho_b).unwrap();
        let ss = steady_state(&Superoperator::assemble(&g), &sys.h_a).unwrap();
        let gibbs = thermal_state(&sys.h_a, 1.0).unwrap();
        assert!(ss.rho_ss.trace_distance(&gibbs).unwrap() < 1e-6);
        assert!((ss.beta_eff - 1.0).abs() < 1e-6);
        // long-time integration reaches the same state
        let res = propagate_continuous(&g, &fock(6, 3), &[0.0, 800.0]).unwrap();
        assert!(res.states[1].trace_distance(&ss.rho_ss).unwrap() < 1e-6);
    }

    #[test]
    fn zero_generator_is_ambiguous() {
        let zero = Superoperator { dim: 3, matrix: CMatrix::zeros(9, 9) };
        let h = Operator::from_real_diagonal(&[0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(steady_state(&zero, &h), Err(Error::Ambiguous { .. })));
    }

    #[test]
    fn full_rabi_steady_state_is_hotter() {
        let w = 2.0 * std::f64::consts::PI;
        let sys = jcm(false, w, 0.05, 5);
        let beta = 2.0;
        let spec = GeneratorSpec::new(&sys, 0.1 * 2.0 * w).unwrap();
        let rho_b = thermal_state(&sys.h_b, beta).unwrap();
        let g = WeakGenerator::new(&spec, &sys, &rho_b).unwrap();
        let ss = steady_state(&Superoperator::assemble(&g), &sys.h_a).unwrap();
        assert!(ss.p1 / ss.p0 > (-beta * w).exp());
        assert!(ss.beta_eff < beta);
    }

    #[test]
    fn min_temp_closed_forms() {
        let w = 3.0;
        assert!((min_temp_predict(0.5 * 2.0 * w, w).unwrap() - 0.2).abs() < 1e-15);
        assert!((min_temp_predict(2.0 * w, w).unwrap() - 0.5).abs() < 1e-15);
        assert!(min_temp_predict(1e-8, w).unwrap() < 1e-17);
        assert!(min_temp_predict(0.0, w).is_err());
        for lambda in [0.1, 1.0, 6.0] {
            let r = four_state_rate(lambda, w, 0.01, 0.0, 1.0, 0.5, 0.5).unwrap();
            assert!((r.steady_ratio - min_temp_predict(lambda, w).unwrap()).abs() < 1e-12);
            let half = four_state_rate(lambda, w, 0.01, 0.5, 0.5, 0.5, 0.5).unwrap();
            assert!((half.steady_ratio - 1.0).abs() < 1e-15);
            assert!(half.dha_dt.abs() < 1e-15);
        }
    }

    #[test]
    fn four_state_model_matches_truncated_rabi_steady_state() {
        let w = 2.0 * std::f64::consts::PI;
        let sys = jcm(false, w, 0.01, 1);
        for x in [0.05, 0.1, 0.5] {
            for beta in [4.0, 8.0] {
                let lambda = 2.0 * w * x;
                let spec = GeneratorSpec::new(&sys, lambda).unwrap();
                let rho_b = thermal_state(&sys.h_b, beta).unwrap();
                let g = WeakGenerator::new(&spec, &sys, &rho_b).unwrap();
                let ss = steady_state(&Superoperator::assemble(&g), &sys.h_a).unwrap();
                let pb = rho_b.populations();
                let model = four_state_rate(lambda, w, 0.01, pb[1], pb[0], ss.p0, ss.p1).unwrap();
                let ratio = ss.p1 / ss.p0;
                assert!((ratio / model.steady_ratio - 1.0).abs() < 0.02, "x={x} β={beta}: {ratio} vs {}", model.steady_ratio);
            }
        }
    }

    #[test]
    fn fast_map_rate_and_detuning_independence() {
        let w = 2.0 * std::f64::consts::PI;
        let gamma = 0.05;
        let lambda = 100.0 * gamma;
        let mut rates = Vec::new();
        for detuning in [0.0, 0.7] {
            let p = JcmParams { omega_a: w, omega_b: w + detuning, gamma, n_max: 5, rwa: true };
            let sys = build_jcm(&p).unwrap();
            let rho_a = thermal_state(&sys.h_a, 0.4).unwrap();
            // same reservoir populations at both detunings
            let rho_b = DensityMatrix::diagonal(&[0.7, 0.3]).unwrap();
            let joint = DensityMatrix::new(kron(rho_a.matrix(), rho_b.matrix())).unwrap();
            let inc = fast_map(&sys, &joint, lambda).unwrap();
            assert!(inc.regime_ok);
            assert!(inc.total().trace().norm() < 1e-12);
            let n_b = kron(&CMatrix::identity(6, 6), &number(2));
            // first order does not move populations
            assert!(trace_product(&n_b, &inc.first_order).abs() < 1e-14);
            let rate = lambda * trace_product(&n_b, &inc.second_order);
            let g = FastGenerator::new(&sys, lambda, &rho_b).unwrap();
            let dn = trace_product(&number(6), &g.apply(rho_a.matrix()));
            assert!((rate + dn).abs() < 1e-14, "{rate} {dn}");
            let pops = rho_a.populations();
            let pb = rho_b.populations();
            let mean_n: f64 = pops.iter().enumerate().map(|(n, p)| n as f64 * p).sum();
            let want = 2.0 * gamma * gamma / lambda * (pb[0] * mean_n - pb[1] * (mean_n + 1.0 - 6.0 * pops[5]));
            assert!((rate - want).abs() < 1e-12 * want.abs(), "{rate} {want}");
            rates.push(rate);
        }
        assert!((rates[0] - rates[1]).abs() < 1e-10);
    }

    #[test]
    fn free_evolution_keeps_populations() {
        let sys = jcm(false, 5.0, 0.0, 3);
        let spec = GeneratorSpec::new(&sys, 0.5).unwrap();
        let rho_b = thermal_state(&sys.h_b, 1.0).unwrap();
        let rho_a = DensityMatrix::new(CMatrix::from_fn(4, 4, |i, j| c(if i == j { 0.25 } else { 0.1 }))).unwrap();
        let grid = [0.0, 1.0, 5.0];
        let cont = lindblad_propagate(&spec, &sys, &rho_a, &rho_b, &grid, &Protocol::Continuous).unwrap();
        let intervals = vec![0.7; 20];
        let int = lindblad_propagate(&spec, &sys, &rho_a, &rho_b, &grid, &Protocol::IntervalPurify { intervals }).unwrap();
        for r in cont.states.iter().chain(&int.states) {
            for (x, y) in r.populations().iter().zip(rho_a.populations()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        // coherences rotate freely
        let u = crate::qcore::Propagator::new(&sys.h_a).unwrap();
        let want = u.evolve_matrix(rho_a.matrix(), 5.0);
        assert!(max_abs(&(cont.states[2].matrix() - &want)) < 1e-8);
        assert!(max_abs(&(int.states[2].matrix() - &want)) < 1e-9);
    }

    #[test]
    fn semigroup_cache_matches_dense_exponential() {
        let sys = jcm(false, 5.0, 0.3, 2);
        let spec = GeneratorSpec::new(&sys, 0.5).unwrap();
        let sop = Superoperator::assemble(&WeakJointGenerator::new(&spec, &sys));
        let mut cache = SemigroupCache::new(&sop);
        let rho = kron(fock(3, 2).matrix(), thermal_state(&sys.h_b, 1.0).unwrap().matrix());
        for tau in [0.0, 0.013, 1.7, 23.4] {
            let want = (&sop.matrix * c(tau)).exp() * CVector::from_column_slice(rho.as_slice());
            let want = CMatrix::from_column_slice(6, 6, want.as_slice());
            let got = cache.apply_matrix(tau, &rho);
            assert!(max_abs(&(got.clone() - want)) < 1e-10, "{tau}");
            assert!((got.trace().re - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interval_and_continuous_protocols_agree_in_the_mean() {
        // both converge to the steady state of the averaged map
        let w = 2.0 * std::f64::consts::PI;
        let sys = jcm(true, w, 0.02, 4);
        let lambda = 0.05;
        let spec = GeneratorSpec::new(&sys, lambda).unwrap();
        let rho_b = thermal_state(&sys.h_b, 1.0).unwrap();
        let joint = Superoperator::assemble(&WeakJointGenerator::new(&spec, &sys));
        let map = averaged_interval_map(&joint, lambda, sys.dims(), &rho_b).unwrap();
        let fixed = steady_state(&map.minus_identity(), &sys.h_a).unwrap();
        let g = WeakGenerator::new(&spec, &sys, &rho_b).unwrap();
        let cont = steady_state(&Superoperator::assemble(&g), &sys.h_a).unwrap();
        assert!(fixed.rho_ss.trace_distance(&cont.rho_ss).unwrap() < 1e-3);
    }

    #[test]
    fn continuous_propagation_rejects_bad_grid() {
        let sys = jcm(true, 1.0, 0.1, 2);
        let spec = GeneratorSpec::new(&sys, 0.5).unwrap();
        let rho_b = thermal_state(&sys.h_b, 1.0).unwrap();
        let g = WeakGenerator::new(&spec, &sys, &rho_b).unwrap();
        assert!(propagate_continuous(&g, &fock(3, 0), &[1.0, 0.5]).is_err());
    }
}
