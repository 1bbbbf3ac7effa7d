//! Closed-form Jaynes-Cummings results and Poisson-averaged transition rates.
//!
//! Everything here is scalar arithmetic, independent of the matrix code, so
//! it can serve as an oracle for the numerical engine.

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::JcmParams;

/// Amplitudes of the two-level block `{|n-1,e⟩, |n,g⟩}` at time `t`.
///
/// Up to a global phase the block propagator is `[[a, b], [b, a*]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JcmAmplitudes {
    pub n: usize,
    pub omega_n: f64,
    pub omega_n_prime: f64,
    pub delta_c: f64,
    pub a_n: Complex64,
    pub b_n: Complex64,
}

impl JcmAmplitudes {
    /// Block density matrix after starting in `|n-1,e⟩`, ordered
    /// `(|n-1,e⟩, |n,g⟩)`.
    pub fn rho_from_excited(&self) -> [[Complex64; 2]; 2] {
        let (a, b) = (self.a_n, self.b_n);
        [[Complex64::new(a.norm_sqr(), 0.0), a * b.conj()], [b * a.conj(), Complex64::new(b.norm_sqr(), 0.0)]]
    }

    /// Block density matrix after starting in `|n,g⟩`.
    pub fn rho_from_ground(&self) -> [[Complex64; 2]; 2] {
        let (a, b) = (self.a_n, self.b_n);
        let (c0, c1) = (b, a.conj());
        [[Complex64::new(c0.norm_sqr(), 0.0), c0 * c1.conj()], [c1 * c0.conj(), Complex64::new(c1.norm_sqr(), 0.0)]]
    }
}

/// Rabi frequency `Ω_n = 2γ√n`.
pub fn rabi_frequency(n: usize, gamma: f64) -> f64 {
    2.0 * gamma * (n as f64).sqrt()
}

/// `a_n(t) = cos(Ω′t/2) - iΔ/Ω′ sin(Ω′t/2)`, `b_n(t) = -iΩ_n/Ω′ sin(Ω′t/2)`.
/// `n = 0` is the uncoupled ground state (`b_0 = 0`).
pub fn amplitudes(n: usize, t: f64, p: &JcmParams) -> Result<JcmAmplitudes> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidParameter(format!("t must be finite and ≥ 0, got {t}")));
    }
    let delta_c = p.delta_c();
    let omega_n = rabi_frequency(n, p.gamma);
    let omega_n_prime = omega_n.hypot(delta_c);
    let (a_n, b_n) = if n == 0 || omega_n_prime == 0.0 {
        (Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0))
    } else {
        let (s, c) = (0.5 * omega_n_prime * t).sin_cos();
        (Complex64::new(c, -delta_c / omega_n_prime * s), Complex64::new(0.0, -omega_n / omega_n_prime * s))
    };
    Ok(JcmAmplitudes { n, omega_n, omega_n_prime, delta_c, a_n, b_n })
}

/// `|b_n(t)|²`.
pub fn b2(n: usize, t: f64, p: &JcmParams) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let omega_n = rabi_frequency(n, p.gamma);
    let op = omega_n.hypot(p.delta_c());
    if op == 0.0 {
        return 0.0;
    }
    let s = (0.5 * op * t).sin();
    (omega_n / op * s).powi(2)
}

/// Cavity photon distribution together with the atom's input populations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AtomFieldState {
    pub p_n: Vec<f64>,
    pub sigma_e: f64,
    pub sigma_g: f64,
    /// Mean number of photons absorbed by the atom in the last update.
    pub x: f64,
}

impl AtomFieldState {
    pub fn new(p_n: Vec<f64>, sigma_e: f64, sigma_g: f64) -> Result<Self> {
        let s = Self { p_n, sigma_e, sigma_g, x: 0.0 };
        s.validate()?;
        Ok(s)
    }

    /// Atom populations of a thermal atom with splitting `omega_b`.
    pub fn thermal_atom(p_n: Vec<f64>, omega_b: f64, beta: f64) -> Result<Self> {
        let r = (-beta * omega_b).exp();
        Self::new(p_n, r / (1.0 + r), 1.0 / (1.0 + r))
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (-1e-14..=1.0 + 1e-14).contains(&x);
        if self.p_n.is_empty() || !self.p_n.iter().all(|&p| in_unit(p)) {
            return Err(Error::InvalidParameter("photon probabilities must lie in [0,1]".into()));
        }
        let total: f64 = self.p_n.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::NotNormalized { value: total });
        }
        if !in_unit(self.sigma_e) || !in_unit(self.sigma_g) || (self.sigma_e + self.sigma_g - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter("atom populations must be probabilities summing to 1".into()));
        }
        Ok(())
    }

    pub fn mean_n(&self) -> f64 {
        self.p_n.iter().enumerate().map(|(n, p)| n as f64 * p).sum()
    }

    /// Geometric distribution `p_n ∝ (σ_e/σ_g)^n` on `n_max + 1` levels.
    pub fn detailed_balance(n_max: usize, sigma_e: f64, sigma_g: f64) -> Result<Self> {
        let r = sigma_e / sigma_g;
        let w: Vec<f64> = (0..=n_max).map(|n| r.powi(n as i32)).collect();
        let z: f64 = w.iter().sum();
        Self::new(w.into_iter().map(|x| x / z).collect(), sigma_e, sigma_g)
    }
}

/// `x(t) = Σ_n p_n (σ_g|b_n(t)|² - σ_e|b_{n+1}(t)|²)`.
pub fn x_of_t(state: &AtomFieldState, t: f64, p: &JcmParams) -> f64 {
    state
        .p_n
        .iter()
        .enumerate()
        .map(|(n, pn)| pn * (state.sigma_g * b2(n, t, p) - state.sigma_e * b2(n + 1, t, p)))
        .sum()
}

/// Energy bookkeeping after one interaction of length `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AtomFieldUpdate {
    pub x: f64,
    pub sigma_e: f64,
    pub sigma_g: f64,
    pub d_h_a: f64,
    pub d_h_b: f64,
}

/// Atom populations and energy changes implied by `x(t)`.
pub fn atom_field_update(state: &AtomFieldState, t: f64, p: &JcmParams) -> AtomFieldUpdate {
    let x = x_of_t(state, t, p);
    AtomFieldUpdate {
        x,
        sigma_e: state.sigma_e + x,
        sigma_g: state.sigma_g - x,
        d_h_a: -p.omega_a * x,
        d_h_b: p.omega_b * x,
    }
}

/// `λ ∫ e^{-λt} |b_n(t)|² dt = ½(1 - (λ²+Δ²)/(λ²+Δ²+4nγ²))`.
pub fn mean_b2_poisson(n: usize, lambda: f64, p: &JcmParams) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda must be > 0, got {lambda}")));
    }
    let l2d2 = lambda * lambda + p.delta_c().powi(2);
    let rabi2 = 4.0 * n as f64 * p.gamma * p.gamma;
    // written as a single ratio to keep precision when rabi2 ≪ l2d2
    Ok(0.5 * rabi2 / (l2d2 + rabi2))
}

/// Weak-coupling absorption rate `2λγ²/(λ²+Δ²)·(σ_g⟨n⟩ - σ_e⟨n+1⟩)`.
pub fn einstein_rate(state: &AtomFieldState, lambda: f64, p: &JcmParams) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda must be > 0, got {lambda}")));
    }
    let n = state.mean_n();
    let pref = 2.0 * lambda * p.gamma * p.gamma / (lambda * lambda + p.delta_c().powi(2));
    Ok(pref * (state.sigma_g * n - state.sigma_e * (n + 1.0)))
}

/// One step of the photon-number rate equation
/// `p_n' = p_n + |b_{n+1}|²(σ_g p_{n+1} - σ_e p_n) - |b_n|²(σ_g p_n - σ_e p_{n-1})`.
///
/// `b2_per_n[n]` holds `|b_n|²` (entry 0 is ignored). The top level reflects:
/// flow out of the retained ladder is dropped.
pub fn pn_master_step(state: &AtomFieldState, b2_per_n: &[f64]) -> Result<AtomFieldState> {
    let len = state.p_n.len();
    if b2_per_n.len() < len {
        return Err(Error::shape(format!("at least {len} coefficients"), b2_per_n.len()));
    }
    let (sg, se) = (state.sigma_g, state.sigma_e);
    // flux[n] = net flow n → n-1 (photon absorbed by the atom), n = 1..len-1
    let mut flux = vec![0.0; len + 1];
    for n in 1..len {
        flux[n] = b2_per_n[n] * (sg * state.p_n[n] - se * state.p_n[n - 1]);
    }
    let mut p_new = Vec::with_capacity(len);
    for n in 0..len {
        let v = state.p_n[n] + flux[n + 1] - flux[n];
        if v < -1e-14 {
            return Err(Error::StepSize(format!("population {n} became negative ({v:e})")));
        }
        p_new.push(v.max(0.0));
    }
    Ok(AtomFieldState { p_n: p_new, sigma_e: se, sigma_g: sg, x: flux.iter().sum() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn params(gamma: f64, delta: f64) -> JcmParams {
        JcmParams { omega_a: 2.0 * PI, omega_b: 2.0 * PI + delta, gamma, n_max: 8, rwa: true }
    }

    #[test]
    fn half_rabi_cycle_is_full_transfer() {
        let p = params(0.05, 0.0);
        for n in 1..5 {
            let t = PI / rabi_frequency(n, p.gamma);
            let amp = amplitudes(n, t, &p).unwrap();
            assert_abs_diff_eq!(amp.b_n.norm_sqr(), 1.0, epsilon = 1e-14);
        }
        let zero = amplitudes(3, 0.0, &p).unwrap();
        assert_eq!(zero.a_n, Complex64::new(1.0, 0.0));
        assert_eq!(zero.b_n, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn unitarity_of_block() {
        let p = params(0.3, 0.7);
        for n in 0..6 {
            for k in 0..50 {
                let amp = amplitudes(n, 0.37 * k as f64, &p).unwrap();
                assert_abs_diff_eq!(amp.a_n.norm_sqr() + amp.b_n.norm_sqr(), 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(amp.b_n.norm_sqr(), b2(n, 0.37 * k as f64, &p), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn x_limits() {
        let p = params(0.05, 0.0);
        let vacuum_ground = AtomFieldState::new(vec![1.0, 0.0, 0.0], 0.0, 1.0).unwrap();
        assert_eq!(x_of_t(&vacuum_ground, 12.3, &p), 0.0);
        let vacuum_excited = AtomFieldState::new(vec![1.0, 0.0, 0.0], 1.0, 0.0).unwrap();
        let t = PI / rabi_frequency(1, p.gamma);
        assert_abs_diff_eq!(x_of_t(&vacuum_excited, t, &p), -1.0, epsilon = 1e-14);
        let up = atom_field_update(&vacuum_excited, t, &p);
        assert_abs_diff_eq!(up.sigma_e, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(up.d_h_a, p.omega_a, epsilon = 1e-12);
    }

    #[test]
    fn detailed_balance_has_no_net_absorption() {
        let p = params(0.05, 0.0);
        let r = (-2.0 * PI * 0.3_f64).exp();
        let se = r / (1.0 + r);
        // wide ladder so the truncated tail is negligible
        let st = AtomFieldState::detailed_balance(60, se, 1.0 - se).unwrap();
        for t in [0.1, 3.0, 17.0, 250.0] {
            assert!(x_of_t(&st, t, &p).abs() < 1e-12);
        }
        assert!(einstein_rate(&st, 0.01, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mean_b2_values() {
        let p = params(0.05, 0.0);
        assert_abs_diff_eq!(mean_b2_poisson(1, 0.01, &p).unwrap(), 0.5 * 0.01 / 0.0101, epsilon = 1e-15);
        assert_abs_diff_eq!(mean_b2_poisson(1, 0.01, &p).unwrap(), 0.495_049_504_950_495, epsilon = 1e-14);
        assert_eq!(mean_b2_poisson(3, 0.2, &params(0.0, 0.1)).unwrap(), 0.0);
        // large-λ leading order 2nγ²/(λ²+Δ²)
        let big = 1e4;
        let v = mean_b2_poisson(2, big, &params(0.05, 0.3)).unwrap();
        let lead = 2.0 * 2.0 * 0.0025 / (big * big + 0.09);
        assert!((v / lead - 1.0).abs() < 1e-9);
        assert!(mean_b2_poisson(1, 0.0, &p).is_err());
    }

    #[test]
    fn mean_b2_against_quadrature() {
        let p = params(0.05, 0.5);
        for n in [1, 5] {
            for lambda in [1e-2, 1.0] {
                let op = rabi_frequency(n, p.gamma).hypot(0.5);
                let q = crate::quad::exponential_average(|t| b2(n, t, &p), lambda, 2.0 * PI / op, 1.0, 1e-12)
                    .unwrap();
                assert_abs_diff_eq!(q.value, mean_b2_poisson(n, lambda, &p).unwrap(), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn einstein_rate_values() {
        let p = params(0.05, 0.0);
        let st = AtomFieldState::new(vec![0.0, 1.0, 0.0], 0.0, 1.0).unwrap();
        let lambda = 0.01;
        assert_abs_diff_eq!(einstein_rate(&st, lambda, &p).unwrap(), 2.0 * 0.0025 / lambda, epsilon = 1e-12);
        // Lorentzian half width: rate at Δ = λ is half of the resonant one
        let detuned = params(0.05, lambda);
        let ratio = einstein_rate(&st, lambda, &detuned).unwrap() / einstein_rate(&st, lambda, &p).unwrap();
        assert_abs_diff_eq!(ratio, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn master_step_cases() {
        let b: Vec<f64> = (0..6).map(|n| if n == 0 { 0.0 } else { 0.1 / n as f64 }).collect();
        let st = AtomFieldState::detailed_balance(5, 0.2, 0.8).unwrap();
        let next = pn_master_step(&st, &b).unwrap();
        for (x, y) in st.p_n.iter().zip(&next.p_n) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
        let one = AtomFieldState::new(vec![0.0, 1.0], 0.0, 1.0).unwrap();
        let out = pn_master_step(&one, &[0.0, 1.0]).unwrap();
        assert_eq!(out.p_n, vec![1.0, 0.0]);
        let st = AtomFieldState::new(vec![0.1, 0.2, 0.3, 0.25, 0.1, 0.05], 0.3, 0.7).unwrap();
        let next = pn_master_step(&st, &b).unwrap();
        assert_abs_diff_eq!(next.p_n.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
        assert!(pn_master_step(&st, &[0.0, 5.0, 5.0, 5.0, 5.0, 5.0]).is_err());
    }

    #[test]
    fn master_iteration_converges_to_geometric() {
        let p = params(0.05, 0.0);
        let (se, sg) = (0.25, 0.75);
        let lambda = 0.05;
        let b: Vec<f64> = (0..=12).map(|n| mean_b2_poisson(n, lambda, &p).unwrap()).collect();
        let mut st = AtomFieldState::new(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], se, sg)
            .unwrap();
        for _ in 0..20_000 {
            st = pn_master_step(&st, &b).unwrap();
        }
        let target = AtomFieldState::detailed_balance(12, se, sg).unwrap();
        let tv: f64 = 0.5 * st.p_n.iter().zip(&target.p_n).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv < 1e-8, "tv = {tv}");
    }
}
