//! Dense complex linear algebra and quantum-state primitives for finite
//! bipartite systems.
//!
//! Joint spaces are always ordered `A ⊗ B` with `A` the slow index, so the
//! joint basis index is `i_a * dim_b + i_b`. Units use ħ = k_B = 1.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Largest joint Hilbert-space dimension any constructor accepts.
pub const MAX_DIM: usize = 4096;

pub(crate) const HERMITIAN_TOL: f64 = 1e-12;
pub(crate) const TRACE_TOL: f64 = 1e-10;
pub(crate) const POSITIVITY_TOL: f64 = 1e-10;
const NORM_TOL: f64 = 1e-12;
/// Eigenvalues below this are a hard positivity failure for entropies.
const ENTROPY_NEG_TOL: f64 = 1e-8;

pub(crate) fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Which factor of a bipartite space to keep in a partial trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subsystem {
    A,
    B,
}

// ---------------------------------------------------------------------------
// raw matrix helpers

pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

pub fn dagger(m: &CMatrix) -> CMatrix {
    m.adjoint()
}

pub fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b - b * a
}

pub fn anticommutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b + b * a
}

pub fn trace(m: &CMatrix) -> C64 {
    m.trace()
}

/// Real part of `tr(a b)` without forming the product.
pub fn trace_product_re(a: &CMatrix, b: &CMatrix) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for k in 0..n {
            acc += (a[(i, k)] * b[(k, i)]).re;
        }
    }
    acc
}

/// Largest element of `|M - M†|`.
pub fn hermiticity_deviation(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * c(0.5)
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::InvalidParameter("dimension must be positive".into()));
    }
    if dim > MAX_DIM {
        return Err(Error::Size { dim, max: MAX_DIM });
    }
    Ok(())
}

fn check_finite(m: &CMatrix, what: &'static str) -> Result<()> {
    if m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Eigen-decomposition of a Hermitian matrix (hermitized first). Eigenvalues
/// are returned in ascending order with matching eigenvector columns.
pub fn eigh(m: &CMatrix) -> (DVector<f64>, CMatrix) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(hermitian_part(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = CMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Partial trace of a raw `dA·dB` square matrix.
pub fn partial_trace_matrix(m: &CMatrix, dims: (usize, usize), keep: Subsystem) -> Result<CMatrix> {
    let (da, db) = dims;
    if m.nrows() != da * db || m.ncols() != da * db {
        return Err(Error::shape(
            format!("{}x{}", da * db, da * db),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(match keep {
        Subsystem::A => CMatrix::from_fn(da, da, |i, j| {
            (0..db).map(|k| m[(i * db + k, j * db + k)]).sum()
        }),
        Subsystem::B => CMatrix::from_fn(db, db, |i, j| {
            (0..da).map(|k| m[(k * db + i, k * db + j)]).sum()
        }),
    })
}

// ---------------------------------------------------------------------------
// Operator

/// A square complex operator (Hamiltonian, unitary, observable).
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    m: CMatrix,
    hermitian: bool,
}

impl Operator {
    pub fn new(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::shape("square matrix", format!("{}x{}", m.nrows(), m.ncols())));
        }
        check_dim(m.nrows())?;
        check_finite(&m, "operator")?;
        Ok(Self { m, hermitian: false })
    }

    /// Builds an operator flagged Hermitian; fails if `max|M - M†| ≥ 1e-12`.
    pub fn hermitian(m: CMatrix) -> Result<Self> {
        let mut op = Self::new(m)?;
        let dev = hermiticity_deviation(&op.m);
        if dev >= HERMITIAN_TOL * (1.0 + max_abs(&op.m)) {
            return Err(Error::NotHermitian { deviation: dev });
        }
        op.m = hermitian_part(&op.m);
        op.hermitian = true;
        Ok(op)
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        Self::hermitian(CMatrix::from_fn(n, n, |i, j| if i == j { c(diag[i]) } else { C64::new(0.0, 0.0) }))
    }

    pub fn identity(dim: usize) -> Self {
        Self { m: CMatrix::identity(dim, dim), hermitian: true }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { m: CMatrix::zeros(dim, dim), hermitian: true }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> CMatrix {
        self.m
    }

    pub fn dagger(&self) -> Self {
        Self { m: self.m.adjoint(), hermitian: self.hermitian }
    }

    /// `⟨O⟩ = Re tr(ρ O)`.
    pub fn expectation(&self, rho: &DensityMatrix) -> Result<f64> {
        if rho.dim() != self.dim() {
            return Err(Error::shape(self.dim(), rho.dim()));
        }
        Ok(trace_product_re(&self.m, rho.matrix()))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { m: &self.m * c(s), hermitian: self.hermitian }
    }
}

/// Kronecker product `self ⊗ other` with `self` the slow index.
pub trait TensorProduct: Sized {
    fn tensor(&self, other: &Self) -> Result<Self>;
}

impl TensorProduct for Operator {
    fn tensor(&self, other: &Self) -> Result<Self> {
        check_dim(self.dim().saturating_mul(other.dim()))?;
        Ok(Self { m: kron(&self.m, &other.m), hermitian: self.hermitian && other.hermitian })
    }
}

impl TensorProduct for DensityMatrix {
    fn tensor(&self, other: &Self) -> Result<Self> {
        check_dim(self.dim().saturating_mul(other.dim()))?;
        Ok(Self { m: kron(&self.m, &other.m) })
    }
}

impl TensorProduct for StateVector {
    fn tensor(&self, other: &Self) -> Result<Self> {
        check_dim(self.dim().saturating_mul(other.dim()))?;
        Ok(Self { v: self.v.kronecker(&other.v) })
    }
}

pub fn tensor_product<T: TensorProduct>(a: &T, b: &T) -> Result<T> {
    a.tensor(b)
}

// ---------------------------------------------------------------------------
// StateVector

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    v: CVector,
}

impl StateVector {
    pub fn new(v: CVector) -> Result<Self> {
        check_dim(v.len())?;
        if !v.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::NonFinite("state vector"));
        }
        let norm = v.norm();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::NotNormalized { value: norm });
        }
        Ok(Self { v })
    }

    /// Normalizes `v`; fails on a zero vector.
    pub fn normalized(v: CVector) -> Result<Self> {
        let norm = v.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NotNormalized { value: norm });
        }
        Self::new(v / c(norm))
    }

    pub fn basis(dim: usize, k: usize) -> Result<Self> {
        check_dim(dim)?;
        if k >= dim {
            return Err(Error::InvalidParameter(format!("basis index {k} out of range for dimension {dim}")));
        }
        let mut v = CVector::zeros(dim);
        v[k] = c(1.0);
        Ok(Self { v })
    }

    pub(crate) fn from_vector_unchecked(v: CVector) -> Self {
        Self { v }
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.v
    }

    pub fn to_density(&self) -> DensityMatrix {
        DensityMatrix { m: &self.v * self.v.adjoint() }
    }

    pub fn expectation(&self, op: &Operator) -> f64 {
        (self.v.adjoint() * op.matrix() * &self.v)[(0, 0)].re
    }
}

// ---------------------------------------------------------------------------
// DensityMatrix

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    m: CMatrix,
}

impl DensityMatrix {
    /// Validates Hermiticity (1e-12), unit trace (1e-10) and positivity
    /// (eigenvalues ≥ -1e-10).
    pub fn new(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::shape("square matrix", format!("{}x{}", m.nrows(), m.ncols())));
        }
        check_dim(m.nrows())?;
        check_finite(&m, "density matrix")?;
        let dev = hermiticity_deviation(&m);
        if dev >= HERMITIAN_TOL {
            return Err(Error::NotHermitian { deviation: dev });
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::NotNormalized { value: tr.re });
        }
        let rho = Self { m: hermitian_part(&m) };
        let min = rho.eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -POSITIVITY_TOL {
            return Err(Error::NotPositive { min_eigenvalue: min });
        }
        Ok(rho)
    }

    /// Wraps a matrix produced by a trusted map (unitary conjugation, partial
    /// trace, convex mixture). Only Hermitizes.
    pub(crate) fn from_matrix_unchecked(m: CMatrix) -> Self {
        Self { m: hermitian_part(&m) }
    }

    pub fn from_pure(psi: &StateVector) -> Self {
        psi.to_density()
    }

    pub fn maximally_mixed(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self { m: CMatrix::identity(dim, dim) * c(1.0 / dim as f64) })
    }

    /// Diagonal state with the given populations (must sum to one).
    pub fn diagonal(probs: &[f64]) -> Result<Self> {
        let n = probs.len();
        let m = CMatrix::from_fn(n, n, |i, j| if i == j { c(probs[i]) } else { C64::new(0.0, 0.0) });
        Self::new(m)
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> CMatrix {
        self.m
    }

    pub fn trace(&self) -> f64 {
        self.m.trace().re
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.m[(i, i)].re).collect()
    }

    pub fn purity(&self) -> f64 {
        trace_product_re(&self.m, &self.m)
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> DVector<f64> {
        eigh(&self.m).0
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn partial_trace(&self, dims: (usize, usize), keep: Subsystem) -> Result<Self> {
        partial_trace(self, dims, keep)
    }

    /// `½‖ρ - σ‖₁`.
    pub fn trace_distance(&self, other: &Self) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::shape(self.dim(), other.dim()));
        }
        let (ev, _) = eigh(&(&self.m - &other.m));
        Ok(0.5 * ev.iter().map(|x| x.abs()).sum::<f64>())
    }

    /// Populations in the eigenbasis held by `basis`.
    pub fn populations_in(&self, basis: &Propagator) -> Result<Vec<f64>> {
        if basis.dim() != self.dim() {
            return Err(Error::shape(basis.dim(), self.dim()));
        }
        let rotated = basis.to_eigenbasis(&self.m);
        Ok((0..self.dim()).map(|i| rotated[(i, i)].re).collect())
    }
}

/// `Tr_B` or `Tr_A` of a bipartite density matrix.
pub fn partial_trace(rho: &DensityMatrix, dims: (usize, usize), keep: Subsystem) -> Result<DensityMatrix> {
    let m = partial_trace_matrix(rho.matrix(), dims, keep)?;
    Ok(DensityMatrix::from_matrix_unchecked(m))
}

// ---------------------------------------------------------------------------
// Propagator

/// Cached eigen-decomposition of a Hermitian generator; `U(t) = V e^{-iEt} V†`.
#[derive(Debug, Clone)]
pub struct Propagator {
    energies: DVector<f64>,
    vectors: CMatrix,
}

impl Propagator {
    pub fn new(h: &Operator) -> Result<Self> {
        if !h.is_hermitian() {
            let dev = hermiticity_deviation(h.matrix());
            if dev >= HERMITIAN_TOL * (1.0 + max_abs(h.matrix())) {
                return Err(Error::NotHermitian { deviation: dev });
            }
        }
        let (energies, vectors) = eigh(h.matrix());
        Ok(Self { energies, vectors })
    }

    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    pub fn energies(&self) -> &DVector<f64> {
        &self.energies
    }

    pub fn eigenvectors(&self) -> &CMatrix {
        &self.vectors
    }

    /// `V† M V`.
    pub fn to_eigenbasis(&self, m: &CMatrix) -> CMatrix {
        self.vectors.adjoint() * m * &self.vectors
    }

    /// `V M V†`.
    pub fn from_eigenbasis(&self, m: &CMatrix) -> CMatrix {
        &self.vectors * m * self.vectors.adjoint()
    }

    fn phases(&self, t: f64) -> Vec<C64> {
        self.energies.iter().map(|&e| C64::from_polar(1.0, -e * t)).collect()
    }

    pub fn unitary(&self, t: f64) -> CMatrix {
        let ph = self.phases(t);
        let mut scaled = self.vectors.clone();
        for (j, p) in ph.iter().enumerate() {
            for i in 0..scaled.nrows() {
                scaled[(i, j)] *= p;
            }
        }
        scaled * self.vectors.adjoint()
    }

    pub fn evolve_vector(&self, v: &CVector, t: f64) -> CVector {
        let mut coeffs = self.vectors.adjoint() * v;
        for (k, p) in self.phases(t).into_iter().enumerate() {
            coeffs[k] *= p;
        }
        &self.vectors * coeffs
    }

    pub fn evolve_matrix(&self, m: &CMatrix, t: f64) -> CMatrix {
        let mut x = self.to_eigenbasis(m);
        let ph = self.phases(t);
        let n = x.nrows();
        for j in 0..n {
            for i in 0..n {
                x[(i, j)] *= ph[i] * ph[j].conj();
            }
        }
        self.from_eigenbasis(&x)
    }
}

/// Unitary evolution of a state under a cached propagator.
pub trait Evolve: Sized {
    fn evolve(&self, prop: &Propagator, t: f64) -> Result<Self>;
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidParameter(format!("evolution time must be finite and ≥ 0, got {t}")));
    }
    Ok(())
}

impl Evolve for StateVector {
    fn evolve(&self, prop: &Propagator, t: f64) -> Result<Self> {
        check_time(t)?;
        if prop.dim() != self.dim() {
            return Err(Error::shape(prop.dim(), self.dim()));
        }
        Ok(Self { v: prop.evolve_vector(&self.v, t) })
    }
}

impl Evolve for DensityMatrix {
    fn evolve(&self, prop: &Propagator, t: f64) -> Result<Self> {
        check_time(t)?;
        if prop.dim() != self.dim() {
            return Err(Error::shape(prop.dim(), self.dim()));
        }
        Ok(Self::from_matrix_unchecked(prop.evolve_matrix(&self.m, t)))
    }
}

pub fn evolve<T: Evolve>(state: &T, prop: &Propagator, t: f64) -> Result<T> {
    state.evolve(prop, t)
}

// ---------------------------------------------------------------------------
// entropies

fn shannon(probs: impl IntoIterator<Item = f64>) -> Result<f64> {
    let mut s = 0.0;
    for p in probs {
        if p < -ENTROPY_NEG_TOL {
            return Err(Error::NotPositive { min_eigenvalue: p });
        }
        if p > 0.0 {
            s -= p * p.ln();
        }
    }
    Ok(s)
}

/// Shannon entropy (nats) of a probability vector; `0 ln 0 = 0`.
pub fn shannon_entropy(probs: &[f64]) -> Result<f64> {
    shannon(probs.iter().copied())
}

/// `S(ρ) = -Σ λ ln λ` in nats.
pub fn von_neumann_entropy(rho: &DensityMatrix) -> Result<f64> {
    shannon(rho.eigenvalues().iter().copied())
}

/// `S(ρ‖σ) = tr ρ ln ρ - tr ρ ln σ`. Returns `+∞` when the support of ρ is
/// not contained in the support of σ.
pub fn relative_entropy(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    if rho.dim() != sigma.dim() {
        return Err(Error::shape(rho.dim(), sigma.dim()));
    }
    let s_rho = von_neumann_entropy(rho)?;
    let (mu, v) = eigh(sigma.matrix());
    let rotated = v.adjoint() * rho.matrix() * &v;
    let mut cross = 0.0;
    for (k, &m) in mu.iter().enumerate() {
        let weight = rotated[(k, k)].re;
        if m <= 1e-14 {
            if weight > 1e-12 {
                return Ok(f64::INFINITY);
            }
            continue;
        }
        cross += weight * m.ln();
    }
    Ok(-s_rho - cross)
}

/// Shannon entropy of the diagonal of ρ in the eigenbasis of `basis`.
pub fn diag_entropy(rho: &DensityMatrix, basis: &Propagator) -> Result<f64> {
    shannon(rho.populations_in(basis)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sigma_z() -> Operator {
        Operator::from_real_diagonal(&[1.0, -1.0]).unwrap()
    }

    fn random_density(dim: usize, seed: u64) -> DensityMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = CMatrix::from_fn(dim, dim, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        let m = &g * g.adjoint();
        let tr = m.trace();
        DensityMatrix::new(m / tr).unwrap()
    }

    #[test]
    fn identity_tensor_identity() {
        let i6 = Operator::identity(3).tensor(&Operator::identity(2)).unwrap();
        assert_eq!(i6.matrix(), &CMatrix::identity(6, 6));
    }

    #[test]
    fn sigma_z_tensor_identity_spectrum() {
        let op = sigma_z().tensor(&Operator::identity(2)).unwrap();
        let (ev, _) = eigh(op.matrix());
        let got: Vec<f64> = ev.iter().copied().collect();
        assert_eq!(got.len(), 4);
        for (g, e) in got.iter().zip([-1.0, -1.0, 1.0, 1.0]) {
            assert_abs_diff_eq!(*g, e, epsilon = 1e-14);
        }
    }

    #[test]
    fn product_trace_is_one() {
        let rho = random_density(3, 1).tensor(&random_density(2, 2)).unwrap();
        assert_abs_diff_eq!(rho.trace(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn oversized_product_is_rejected() {
        let a = Operator::identity(64);
        let b = Operator::identity(65);
        assert!(matches!(a.tensor(&b), Err(Error::Size { .. })));
    }

    #[test]
    fn bell_state_reduces_to_maximally_mixed() {
        let s = 1.0 / 2f64.sqrt();
        let psi = StateVector::new(CVector::from_vec(vec![c(s), c(0.0), c(0.0), c(s)])).unwrap();
        let rho_a = psi.to_density().partial_trace((2, 2), Subsystem::A).unwrap();
        assert_abs_diff_eq!(max_abs(&(rho_a.matrix() - CMatrix::identity(2, 2) * c(0.5))), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn partial_trace_matches_index_contraction() {
        let rho = random_density(6, 7);
        let (da, db) = (3, 2);
        for keep in [Subsystem::A, Subsystem::B] {
            let got = rho.partial_trace((da, db), keep).unwrap();
            // brute force: explicit 4-index contraction
            let d = if keep == Subsystem::A { da } else { db };
            let mut want = CMatrix::zeros(d, d);
            for ia in 0..da {
                for ib in 0..db {
                    for ja in 0..da {
                        for jb in 0..db {
                            let z = rho.matrix()[(ia * db + ib, ja * db + jb)];
                            match keep {
                                Subsystem::A if ib == jb => want[(ia, ja)] += z,
                                Subsystem::B if ia == ja => want[(ib, jb)] += z,
                                _ => {}
                            }
                        }
                    }
                }
            }
            assert_abs_diff_eq!(max_abs(&(got.matrix() - want)), 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(got.trace(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn partial_trace_shape_error() {
        let rho = random_density(5, 3);
        assert!(matches!(rho.partial_trace((2, 2), Subsystem::A), Err(Error::Shape { .. })));
    }

    #[test]
    fn evolve_zero_time_and_eigenstate() {
        let h = Operator::hermitian(CMatrix::from_row_slice(
            2,
            2,
            &[c(1.0), C64::new(0.3, 0.2), C64::new(0.3, -0.2), c(-0.5)],
        ))
        .unwrap();
        let prop = Propagator::new(&h).unwrap();
        let rho = random_density(2, 9);
        let same = rho.evolve(&prop, 0.0).unwrap();
        assert_abs_diff_eq!(max_abs(&(same.matrix() - rho.matrix())), 0.0, epsilon = 1e-14);

        let ground = StateVector::new(prop.eigenvectors().column(0).into_owned()).unwrap();
        let evolved = ground.to_density().evolve(&prop, 3.7).unwrap();
        assert_abs_diff_eq!(max_abs(&(evolved.matrix() - ground.to_density().matrix())), 0.0, epsilon = 1e-13);
        assert!(rho.evolve(&prop, -1.0).is_err());
    }

    #[test]
    fn propagator_reconstructs_hamiltonian() {
        let rho = random_density(5, 11);
        let h = Operator::hermitian(rho.matrix().clone()).unwrap();
        let prop = Propagator::new(&h).unwrap();
        let v = prop.eigenvectors();
        assert!(max_abs(&(v.adjoint() * v - CMatrix::identity(5, 5))) < 1e-10);
        let e = CMatrix::from_diagonal(&prop.energies().map(c));
        assert!(max_abs(&(prop.from_eigenbasis(&e) - h.matrix())) < 1e-10);
        let u = prop.unitary(2.5);
        assert!(max_abs(&(u.adjoint() * &u - CMatrix::identity(5, 5))) < 1e-12);
    }

    #[test]
    fn entropy_values() {
        let pure = StateVector::basis(3, 1).unwrap().to_density();
        assert_abs_diff_eq!(von_neumann_entropy(&pure).unwrap(), 0.0, epsilon = 1e-12);
        let mixed = DensityMatrix::maximally_mixed(2).unwrap();
        assert_abs_diff_eq!(von_neumann_entropy(&mixed).unwrap(), 2f64.ln(), epsilon = 1e-14);
        let a = random_density(3, 21);
        let b = random_density(2, 22);
        let joint = a.tensor(&b).unwrap();
        let sum = von_neumann_entropy(&a).unwrap() + von_neumann_entropy(&b).unwrap();
        assert_abs_diff_eq!(von_neumann_entropy(&joint).unwrap(), sum, epsilon = 1e-10);
    }

    #[test]
    fn entropy_rejects_negative_spectrum() {
        let m = CMatrix::from_diagonal(&DVector::from_vec(vec![c(1.1), c(-0.1)]));
        let bad = DensityMatrix::from_matrix_unchecked(m);
        assert!(matches!(von_neumann_entropy(&bad), Err(Error::NotPositive { .. })));
        assert!(DensityMatrix::diagonal(&[1.1, -0.1]).is_err());
    }

    #[test]
    fn relative_entropy_values() {
        let rho = random_density(4, 5);
        assert_abs_diff_eq!(relative_entropy(&rho, &rho).unwrap(), 0.0, epsilon = 1e-10);
        let ground = StateVector::basis(2, 0).unwrap().to_density();
        let mixed = DensityMatrix::maximally_mixed(2).unwrap();
        assert_abs_diff_eq!(relative_entropy(&ground, &mixed).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert_eq!(relative_entropy(&mixed, &ground).unwrap(), f64::INFINITY);

        // definition oracle: -S(ρ) - tr(ρ ln σ) via an explicit matrix logarithm
        let sigma = random_density(4, 6);
        let (mu, v) = eigh(sigma.matrix());
        let log_sigma = &v * CMatrix::from_diagonal(&mu.map(|x| c(x.ln()))) * v.adjoint();
        let want = -von_neumann_entropy(&rho).unwrap() - trace_product_re(rho.matrix(), &log_sigma);
        assert_abs_diff_eq!(relative_entropy(&rho, &sigma).unwrap(), want, epsilon = 1e-10);
    }

    #[test]
    fn diag_entropy_values() {
        let diag = DensityMatrix::diagonal(&[0.7, 0.2, 0.1]).unwrap();
        let basis = Propagator::new(&Operator::from_real_diagonal(&[0.0, 1.0, 2.0]).unwrap()).unwrap();
        assert_abs_diff_eq!(
            diag_entropy(&diag, &basis).unwrap(),
            von_neumann_entropy(&diag).unwrap(),
            epsilon = 1e-12
        );
        let s = 1.0 / 2f64.sqrt();
        let plus = StateVector::new(CVector::from_vec(vec![c(s), c(s)])).unwrap().to_density();
        let qubit = Propagator::new(&sigma_z()).unwrap();
        assert_abs_diff_eq!(diag_entropy(&plus, &qubit).unwrap(), 2f64.ln(), epsilon = 1e-12);
        let rho = random_density(3, 8);
        assert!(diag_entropy(&rho, &basis).unwrap() >= von_neumann_entropy(&rho).unwrap() - 1e-10);
    }
}
