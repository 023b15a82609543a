//! Real branches of the Lambert W function, the inverse of `w·e^w`.
//!
//! Both branches are refined by Halley iteration from series or asymptotic
//! starting points. `W_0` covers `x ≥ −1/e` with `W_0 ≥ −1`; `W_{−1}` covers
//! `−1/e ≤ x < 0` with `W_{−1} ≤ −1`.

use std::f64::consts::E;

const INV_E: f64 = 1.0 / E;
const MAX_ITERATIONS: usize = 64;

/// Principal branch. Returns `None` for `x < −1/e` or non-finite input.
pub fn lambert_w0(x: f64) -> Option<f64> {
    if !x.is_finite() || x < -INV_E {
        return None;
    }
    if x == 0.0 {
        return Some(0.0);
    }
    let start = if x < -0.32 {
        branch_point_series(x, 1.0)
    } else if x < 3.0 {
        // Winitzki
        let l = x.ln_1p();
        l * (1.0 - (1.0 + l).ln() / (2.0 + l))
    } else {
        let l1 = x.ln();
        let l2 = l1.ln();
        l1 - l2 + l2 / l1
    };
    Some(halley(x, start.max(-1.0)))
}

/// Lower branch. Returns `None` outside `[−1/e, 0)`.
pub fn lambert_wm1(x: f64) -> Option<f64> {
    if !(-INV_E..0.0).contains(&x) {
        return None;
    }
    let start = if x < -0.25 {
        branch_point_series(x, -1.0)
    } else {
        let l1 = (-x).ln();
        let l2 = (-l1).ln();
        l1 - l2 + l2 / l1
    };
    Some(halley(x, start.min(-1.0)))
}

/// Expansion around `x = −1/e` in `p = ±√(2(ex + 1))`.
fn branch_point_series(x: f64, sign: f64) -> f64 {
    let p = sign * (2.0 * (E * x + 1.0)).max(0.0).sqrt();
    -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
}

fn halley(x: f64, mut w: f64) -> f64 {
    for _ in 0..MAX_ITERATIONS {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        if wp1 == 0.0 {
            // exactly at the branch point
            return w;
        }
        let step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1));
        if !step.is_finite() {
            return w;
        }
        w -= step;
        if step.abs() <= 1e-15 * (1.0 + w.abs()) {
            break;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual(w: f64, x: f64) -> f64 {
        (w * w.exp() - x).abs()
    }

    #[test]
    fn known_values() {
        // Ω constant
        assert!((lambert_w0(1.0).unwrap() - 0.567_143_290_409_783_8).abs() < 1e-15);
        assert!((lambert_w0(E).unwrap() - 1.0).abs() < 1e-15);
        assert!((lambert_w0(-INV_E).unwrap() + 1.0).abs() < 1e-7);
        assert!((lambert_wm1(-INV_E).unwrap() + 1.0).abs() < 1e-7);
        // W_{-1}(-2 e^{-2}) = -2
        assert!((lambert_wm1(-2.0 * (-2f64).exp()).unwrap() + 2.0).abs() < 1e-13);
        assert!(lambert_wm1(0.5).is_none());
        assert!(lambert_w0(-0.5).is_none());
    }

    #[test]
    fn residuals_across_domain() {
        for i in 1..2000 {
            let x = -INV_E + (i as f64) * (INV_E / 2000.0);
            let w = lambert_wm1(x).unwrap();
            assert!(w <= -1.0);
            assert!(residual(w, x) <= 1e-12, "wm1 x={x} w={w}");
            let w = lambert_w0(x).unwrap();
            assert!(w >= -1.0);
            assert!(residual(w, x) <= 1e-12, "w0 x={x} w={w}");
        }
        for x in [1e-300, 1e-10, 0.1, 2.0, 10.0, 1e3, 1e10, 1e100] {
            let w = lambert_w0(x).unwrap();
            assert!(residual(w, x) <= 1e-12 * x.max(1.0), "w0 x={x}");
        }
        for x in [-1e-300, -1e-100, -1e-10, -1e-3] {
            let w = lambert_wm1(x).unwrap();
            assert!((w * w.exp() / x - 1.0).abs() <= 1e-12, "wm1 x={x}");
        }
    }

    #[test]
    fn non_trivial_roots_of_gamma_equation() {
        // w e^w = -Γ e^{-Γ} has roots -Γ and one other; the other must be found.
        for &g in &[0.01, 0.2, 0.7, 0.999, 1.001, 1.5, 5.0, 40.0] {
            let x = -g * (-g as f64).exp();
            let (w0, wm1) = (lambert_w0(x).unwrap(), lambert_wm1(x).unwrap());
            let other = if g < 1.0 { wm1 } else { w0 };
            let trivial = if g < 1.0 { w0 } else { wm1 };
            assert!((trivial + g).abs() < 1e-9 * g.max(1.0), "g={g}");
            assert!((other + g).abs() > 1e-4, "g={g}");
        }
    }
}
