//! Adaptive Gauss-Kronrod quadrature for smooth scalar integrands.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7]
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_DEPTH: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
}

/// One 15-point Kronrod rule with the embedded 7-point Gauss error estimate.
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(mid);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for k in 0..7 {
        let dx = half * XGK[k];
        let pair = f(mid - dx) + f(mid + dx);
        kronrod += WGK[k] * pair;
        if k % 2 == 1 {
            gauss += WG[k / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

fn adapt<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: (f64, f64), tol: f64, depth: u32) -> Result<QuadResult> {
    let (value, error) = whole;
    if error <= tol.max(1e-15 * value.abs()) || (b - a).abs() < 1e-14 * (1.0 + a.abs()) {
        return Ok(QuadResult { value, error });
    }
    if depth >= MAX_DEPTH {
        return Err(Error::StepSize(format!("quadrature did not converge on [{a}, {b}]")));
    }
    let m = 0.5 * (a + b);
    let left = adapt(f, a, m, gk15(f, a, m), 0.5 * tol, depth + 1)?;
    let right = adapt(f, m, b, gk15(f, m, b), 0.5 * tol, depth + 1)?;
    Ok(QuadResult { value: left.value + right.value, error: left.error + right.error })
}

/// `∫_a^b f` to absolute tolerance `tol` by recursive bisection.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<QuadResult> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidParameter("integration limits must be finite".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("tolerance must be positive".into()));
    }
    let first = gk15(&f, a, b);
    if !first.0.is_finite() {
        return Err(Error::NonFinite("integrand"));
    }
    adapt(&f, a, b, first, tol, 0)
}

/// Exponential average `λ ∫_0^∞ e^{-λt} f(t) dt` for `|f| ≤ bound`.
///
/// The half-line is cut into panels of width `panel` (pick something close to
/// the period of `f` so each panel is smooth) and summed until the remaining
/// weight `bound·e^{-λt}` drops below `tol`.
pub fn exponential_average<F: Fn(f64) -> f64>(f: F, lambda: f64, panel: f64, bound: f64, tol: f64) -> Result<QuadResult> {
    if !(lambda > 0.0) || !(panel > 0.0) {
        return Err(Error::InvalidParameter("lambda and panel must be positive".into()));
    }
    let g = |t: f64| lambda * (-lambda * t).exp() * f(t);
    // cap the panel so each one carries at most a few e-folds of the weight
    let h = panel.min(1.0 / lambda);
    // roughly 40/(λh) panels are needed; share the budget between them
    let per_panel = 0.02 * tol * (lambda * h).min(1.0);
    let mut t = 0.0;
    let mut value = 0.0;
    let mut error = 0.0;
    loop {
        let tail = bound * (-lambda * t).exp();
        if tail < tol {
            return Ok(QuadResult { value, error: error + tail });
        }
        let r = integrate(g, t, t + h, per_panel)?;
        value += r.value;
        error += r.error;
        t += h;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn polynomials_are_exact() {
        let r = integrate(|x| x.powi(5) - 2.0 * x * x + 1.0, -1.0, 2.0, 1e-14).unwrap();
        let want = (64.0 - 1.0) / 6.0 - 2.0 * 9.0 / 3.0 + 3.0;
        assert_abs_diff_eq!(r.value, want, epsilon = 1e-13);
    }

    #[test]
    fn oscillatory_integrand() {
        let r = integrate(|x| (10.0 * x).sin().powi(2), 0.0, 7.0, 1e-12).unwrap();
        let want = 3.5 - (140.0_f64).sin() / 40.0;
        assert_abs_diff_eq!(r.value, want, epsilon = 1e-11);
    }

    #[test]
    fn exponential_average_of_cosine() {
        // λ ∫ e^{-λt} cos(ωt) dt = λ²/(λ²+ω²)
        for (lambda, omega) in [(0.01, 1.0), (1.0, 3.0), (50.0, 0.2)] {
            let r = exponential_average(|t| (omega * t).cos(), lambda, 1.0 / omega, 1.0, 1e-12).unwrap();
            assert_abs_diff_eq!(r.value, lambda * lambda / (lambda * lambda + omega * omega), epsilon = 1e-10);
        }
    }
}
