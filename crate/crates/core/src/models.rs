//! Hamiltonians of the cavity/atom model and thermal reservoir states.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qcore::{
    c, eigh, kron, max_abs, partial_trace_matrix, CMatrix, DensityMatrix, Operator, Subsystem, TensorProduct, C64,
};

/// Parameters of the single-mode Jaynes-Cummings model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JcmParams {
    pub omega_a: f64,
    pub omega_b: f64,
    pub gamma: f64,
    /// Cavity dimension is `n_max + 1`.
    pub n_max: usize,
    pub rwa: bool,
}

impl Default for JcmParams {
    fn default() -> Self {
        let w = 2.0 * std::f64::consts::PI;
        Self { omega_a: w, omega_b: w, gamma: 0.05, n_max: 5, rwa: false }
    }
}

impl JcmParams {
    /// Detuning `ω_B - ω_A`.
    pub fn delta_c(&self) -> f64 {
        self.omega_b - self.omega_a
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_a > 0.0 && self.omega_a.is_finite()) {
            return Err(Error::InvalidParameter(format!("omega_a must be > 0, got {}", self.omega_a)));
        }
        if !(self.omega_b > 0.0 && self.omega_b.is_finite()) {
            return Err(Error::InvalidParameter(format!("omega_b must be > 0, got {}", self.omega_b)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma must be ≥ 0, got {}", self.gamma)));
        }
        if self.n_max < 1 {
            return Err(Error::InvalidParameter("n_max must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// A central system and reservoir with `H = H_A⊗I + I⊗H_B + γ H_AB`.
///
/// `h_ab` is stored without the coupling strength.
#[derive(Debug, Clone)]
pub struct JointSystem {
    pub dim_a: usize,
    pub dim_b: usize,
    pub h_a: Operator,
    pub h_b: Operator,
    pub h_ab: Operator,
    pub gamma: f64,
    /// Index of the highest retained level of `A` when it is a truncated
    /// ladder; used for truncation monitoring.
    pub truncation_level: Option<usize>,
}

impl JointSystem {
    pub fn new(h_a: Operator, h_b: Operator, h_ab: Operator, gamma: f64) -> Result<Self> {
        for (name, op) in [("h_a", &h_a), ("h_b", &h_b), ("h_ab", &h_ab)] {
            if !op.is_hermitian() {
                return Err(Error::Precondition(format!("{name} must be Hermitian")));
            }
        }
        let (dim_a, dim_b) = (h_a.dim(), h_b.dim());
        if h_ab.dim() != dim_a * dim_b {
            return Err(Error::shape(dim_a * dim_b, h_ab.dim()));
        }
        if !(gamma.is_finite()) {
            return Err(Error::NonFinite("gamma"));
        }
        // tensor() enforces the joint size limit
        Operator::identity(dim_a).tensor(&Operator::identity(dim_b))?;
        Ok(Self { dim_a, dim_b, h_a, h_b, h_ab, gamma, truncation_level: None })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.dim_a, self.dim_b)
    }

    pub fn dim(&self) -> usize {
        self.dim_a * self.dim_b
    }

    /// `H_A ⊗ I + I ⊗ H_B`.
    pub fn h0(&self) -> CMatrix {
        kron(self.h_a.matrix(), &CMatrix::identity(self.dim_b, self.dim_b))
            + kron(&CMatrix::identity(self.dim_a, self.dim_a), self.h_b.matrix())
    }

    pub fn h_a_joint(&self) -> CMatrix {
        kron(self.h_a.matrix(), &CMatrix::identity(self.dim_b, self.dim_b))
    }

    pub fn h_b_joint(&self) -> CMatrix {
        kron(&CMatrix::identity(self.dim_a, self.dim_a), self.h_b.matrix())
    }

    /// Full Hamiltonian including `γ H_AB`.
    pub fn total(&self) -> Operator {
        let m = self.h0() + self.h_ab.matrix() * c(self.gamma);
        Operator::hermitian(m).expect("sum of Hermitian operators")
    }

    /// Same system with a different coupling strength.
    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self { gamma, ..self.clone() }
    }
}

/// Truncated annihilation operator on `dim` Fock levels.
pub fn annihilation(dim: usize) -> CMatrix {
    CMatrix::from_fn(dim, dim, |i, j| if j == i + 1 { c((j as f64).sqrt()) } else { C64::new(0.0, 0.0) })
}

/// Builds the cavity (A) / two-level atom (B) model. Atom basis: index 0 is
/// `|g⟩`, index 1 is `|e⟩`.
pub fn build_jcm(p: &JcmParams) -> Result<JointSystem> {
    p.validate()?;
    let da = p.n_max + 1;
    let h_a: Vec<f64> = (0..da).map(|n| p.omega_a * (n as f64 + 0.5)).collect();
    let h_b = [-0.5 * p.omega_b, 0.5 * p.omega_b];
    let a = annihilation(da);
    let sm = annihilation(2); // |g⟩⟨e|
    let mut h_ab = kron(&a.adjoint(), &sm) + kron(&a, &sm.adjoint());
    if !p.rwa {
        h_ab += kron(&a.adjoint(), &sm.adjoint()) + kron(&a, &sm);
    }
    let mut sys = JointSystem::new(
        Operator::from_real_diagonal(&h_a)?,
        Operator::from_real_diagonal(&h_b)?,
        Operator::hermitian(h_ab)?,
        p.gamma,
    )?;
    sys.truncation_level = Some(p.n_max);
    Ok(sys)
}

/// Gibbs state `e^{-βH}/Z`. `beta = f64::INFINITY` gives the ground-state
/// projector and fails if the ground level is degenerate.
pub fn thermal_state(h: &Operator, beta: f64) -> Result<DensityMatrix> {
    if !h.is_hermitian() {
        return Err(Error::Precondition("thermal_state needs a Hermitian operator".into()));
    }
    if beta.is_nan() || beta < 0.0 {
        return Err(Error::InvalidParameter(format!("beta must be ≥ 0, got {beta}")));
    }
    let (e, v) = eigh(h.matrix());
    let n = e.len();
    let e0 = e[0];
    let weights: Vec<f64> = if beta.is_infinite() {
        let scale = 1.0 + e.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let ground = e.iter().filter(|&&x| x - e0 <= 1e-10 * scale).count();
        if ground > 1 {
            return Err(Error::Precondition(format!("ground level is {ground}-fold degenerate")));
        }
        (0..n).map(|k| if k == 0 { 1.0 } else { 0.0 }).collect()
    } else {
        let w: Vec<f64> = e.iter().map(|&x| (-beta * (x - e0)).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    };
    let d = CMatrix::from_fn(n, n, |i, j| if i == j { c(weights[i]) } else { C64::new(0.0, 0.0) });
    DensityMatrix::new(&v * d * v.adjoint())
}

/// One failed coupling-structure check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingViolation {
    /// Subsystem that was traced out.
    pub traced: &'static str,
    pub power: u32,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingReport {
    pub max_power: u32,
    pub violations: Vec<CouplingViolation>,
}

impl CouplingReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `Tr_A[(H_A)^k H_AB] = 0` and `Tr_B[(H_B)^k H_AB] = 0` for
/// `k = 0..=max_power` (tolerance 1e-10, relative to the operator scale).
/// Report only; nothing acts on the result.
pub fn validate_coupling(sys: &JointSystem, max_power: u32) -> Result<CouplingReport> {
    if max_power < 1 {
        return Err(Error::InvalidParameter("max_power must be ≥ 1".into()));
    }
    let (da, db) = sys.dims();
    let mut violations = Vec::new();
    let mut pa = CMatrix::identity(da, da);
    let mut pb = CMatrix::identity(db, db);
    for k in 0..=max_power {
        let fa = kron(&pa, &CMatrix::identity(db, db)) * sys.h_ab.matrix();
        let fb = kron(&CMatrix::identity(da, da), &pb) * sys.h_ab.matrix();
        let ta = partial_trace_matrix(&fa, (da, db), Subsystem::B)?;
        let tb = partial_trace_matrix(&fb, (da, db), Subsystem::A)?;
        let scale_a = 1.0 + max_abs(&pa) * max_abs(sys.h_ab.matrix());
        let scale_b = 1.0 + max_abs(&pb) * max_abs(sys.h_ab.matrix());
        let (dev_a, dev_b) = (max_abs(&ta), max_abs(&tb));
        if dev_a > 1e-10 * scale_a {
            violations.push(CouplingViolation { traced: "A", power: k, deviation: dev_a });
        }
        if dev_b > 1e-10 * scale_b {
            violations.push(CouplingViolation { traced: "B", power: k, deviation: dev_b });
        }
        pa = &pa * sys.h_a.matrix();
        pb = &pb * sys.h_b.matrix();
    }
    Ok(CouplingReport { max_power, violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::{commutator, hermiticity_deviation, Propagator};
    use approx::assert_abs_diff_eq;

    fn params(rwa: bool) -> JcmParams {
        JcmParams { omega_a: 1.3, omega_b: 1.7, gamma: 0.2, n_max: 4, rwa }
    }

    #[test]
    fn rwa_conserves_excitations() {
        let sys = build_jcm(&params(true)).unwrap();
        let n_a = CMatrix::from_fn(5, 5, |i, j| if i == j { c(i as f64) } else { c(0.0) });
        let proj_e = CMatrix::from_fn(2, 2, |i, j| if i == 1 && j == 1 { c(1.0) } else { c(0.0) });
        let n_exc = kron(&n_a, &CMatrix::identity(2, 2)) + kron(&CMatrix::identity(5, 5), &proj_e);
        assert!(max_abs(&commutator(sys.total().matrix(), &n_exc)) < 1e-13);
        let full = build_jcm(&params(false)).unwrap();
        assert!(max_abs(&commutator(full.total().matrix(), &n_exc)) > 0.1);
    }

    #[test]
    fn counter_rotating_matrix_element() {
        let sys = build_jcm(&params(false)).unwrap();
        // |0,g⟩ is index 0, |1,e⟩ is index 1*2+1
        assert_abs_diff_eq!(sys.h_ab.matrix()[(0, 3)].re, 1.0, epsilon = 1e-15);
        let rwa = build_jcm(&params(true)).unwrap();
        assert_eq!(rwa.h_ab.matrix()[(0, 3)], c(0.0));
    }

    #[test]
    fn single_photon_cavity_spectrum() {
        let p = JcmParams { n_max: 1, ..params(true) };
        let sys = build_jcm(&p).unwrap();
        let e = Propagator::new(&sys.h_a).unwrap().energies().clone();
        assert_abs_diff_eq!(e[0], 0.65, epsilon = 1e-14);
        assert_abs_diff_eq!(e[1], 1.95, epsilon = 1e-14);
    }

    #[test]
    fn rwa_block_matches_two_level_form() {
        let p = params(true);
        let sys = build_jcm(&p).unwrap();
        let h = sys.total();
        for n in 1..=p.n_max {
            let (i, j) = ((n - 1) * 2 + 1, n * 2); // |n-1,e⟩, |n,g⟩
            let e_ne = p.omega_a * (n as f64 - 0.5) + 0.5 * p.omega_b;
            let e_ng = p.omega_a * (n as f64 + 0.5) - 0.5 * p.omega_b;
            assert_abs_diff_eq!(h.matrix()[(i, i)].re, e_ne, epsilon = 1e-13);
            assert_abs_diff_eq!(h.matrix()[(j, j)].re, e_ng, epsilon = 1e-13);
            assert_abs_diff_eq!(h.matrix()[(i, j)].re, p.gamma * (n as f64).sqrt(), epsilon = 1e-14);
        }
    }

    #[test]
    fn thermal_limits() {
        let h = Operator::from_real_diagonal(&[0.0, 1.0, 2.5]).unwrap();
        let hot = thermal_state(&h, 0.0).unwrap();
        assert!(max_abs(&(hot.matrix() - CMatrix::identity(3, 3) * c(1.0 / 3.0))) < 1e-15);
        let cold = thermal_state(&h, f64::INFINITY).unwrap();
        assert_abs_diff_eq!(cold.populations()[0], 1.0, epsilon = 1e-15);
        let degenerate = Operator::from_real_diagonal(&[0.0, 0.0, 1.0]).unwrap();
        assert!(thermal_state(&degenerate, f64::INFINITY).is_err());
    }

    #[test]
    fn qubit_boltzmann_ratio() {
        let w = 2.0 * std::f64::consts::PI;
        let h = Operator::from_real_diagonal(&[-w / 2.0, w / 2.0]).unwrap();
        let rho = thermal_state(&h, 1.0).unwrap();
        let p = rho.populations();
        assert_abs_diff_eq!(p[1] / p[0], (-w).exp(), epsilon = 1e-15);
    }

    #[test]
    fn thermal_commutes_with_hamiltonian() {
        let m = CMatrix::from_row_slice(2, 2, &[c(0.3), C64::new(0.1, 0.4), C64::new(0.1, -0.4), c(-1.0)]);
        let h = Operator::hermitian(m).unwrap();
        let rho = thermal_state(&h, 2.0).unwrap();
        assert!(max_abs(&commutator(rho.matrix(), h.matrix())) < 1e-12);
        assert!(hermiticity_deviation(rho.matrix()) < 1e-14);
    }

    #[test]
    fn jcm_coupling_structure_passes() {
        for rwa in [true, false] {
            let sys = build_jcm(&params(rwa)).unwrap();
            assert!(validate_coupling(&sys, 4).unwrap().passed());
        }
    }

    #[test]
    fn constant_offset_violates_k0() {
        let sx = CMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(1.0), c(0.0)]);
        let h_ab = kron(&CMatrix::identity(2, 2), &sx) + CMatrix::identity(4, 4) * c(0.3);
        let h = Operator::from_real_diagonal(&[0.0, 1.0]).unwrap();
        let sys = JointSystem::new(h.clone(), h.clone(), Operator::hermitian(h_ab).unwrap(), 1.0).unwrap();
        let report = validate_coupling(&sys, 2).unwrap();
        assert!(report.violations.iter().any(|v| v.power == 0));

        let zero = JointSystem::new(h.clone(), h, Operator::zeros(4), 1.0).unwrap();
        assert!(validate_coupling(&zero, 4).unwrap().passed());
    }
}
