//! Series solutions `C_k(x, lambda) = x^xi_k sum_mu c_{k,mu} (rho x)^(n mu)`
//! of the potential-free equation. On the collar these are the exact
//! fundamental system.

use crate::error::{Error, Result};
use crate::exponents::{ExponentSet, IndicialPolynomial};
use crate::linalg::{det, CMatrix, C64, ONE, ZERO};
use crate::model::Edge;

/// Hard cap on series terms.
pub const MAX_TERMS: usize = 300;
/// `|delta(xi + s n)|` below this is treated as resonance.
const RESONANCE_FLOOR: f64 = 1e-13;
/// Collar basis determinant tolerance before an error is raised.
const COLLAR_WRONSKIAN_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesEvaluation {
    pub edge: usize,
    pub k: usize,
    pub derivative: usize,
    pub x: f64,
    pub lambda: C64,
    pub value: C64,
    pub terms_used: usize,
    pub truncation_estimate: f64,
}

/// `c_{k,0..=m}` from `c_{k,mu} delta(xi_k + mu n) = c_{k,mu-1}`; `k` is 1-based.
pub fn series_coefficients(p: &IndicialPolynomial, exps: &ExponentSet, k: usize, m: usize) -> Result<Vec<C64>> {
    let n = p.order() as f64;
    let xi = exps.roots[k - 1];
    let mut out = Vec::with_capacity(m + 1);
    out.push(exps.leading[k - 1]);
    for mu in 1..=m {
        let d = p.eval(xi + mu as f64 * n);
        if d.norm() < RESONANCE_FLOOR {
            return Err(Error::ResonantExponent { shift: mu });
        }
        out.push(out[mu - 1] / d);
    }
    Ok(out)
}

/// `prod_{i<nu} (a - i)`.
fn falling(a: C64, nu: usize) -> C64 {
    (0..nu).fold(ONE, |acc, i| acc * (a - i as f64))
}

/// Sums the termwise `nu`-th derivative of the series up to `cap` terms.
/// Any derivative order is accepted (the ODE residual check needs `nu = n`).
pub(crate) fn eval_series(
    edge: &Edge,
    k: usize,
    nu: usize,
    x: f64,
    lambda: C64,
    cap: usize,
) -> Result<SeriesEvaluation> {
    assert!(x > 0.0, "series evaluated at non-positive x");
    let n = edge.order();
    let xi = edge.exponents.roots[k - 1];
    let p = &edge.indicial;
    let lnx = x.ln();
    let step = lambda * x.powi(n as i32);
    let mut coef = edge.exponents.leading[k - 1];
    // (lambda x^n)^mu
    let mut scale = ONE;
    let base = ((xi - nu as f64) * lnx).exp();
    let mut sum = ZERO;
    let mut min_nonzero = f64::INFINITY;
    let mut run = 0usize;
    let mut tail = [0.0f64; 3];
    for mu in 0..=cap {
        if mu > 0 {
            let d = p.eval(xi + (mu * n) as f64);
            if d.norm() < RESONANCE_FLOOR {
                return Err(Error::ResonantExponent { shift: mu });
            }
            coef /= d;
            scale *= step;
        }
        let term = coef * scale * falling(xi + (mu * n) as f64, nu) * base;
        sum += term;
        let mag = term.norm();
        if mag > 0.0 {
            min_nonzero = min_nonzero.min(mag);
        }
        tail = [tail[1], tail[2], mag];
        let floor = if min_nonzero.is_finite() { min_nonzero } else { 0.0 };
        if mag <= 1e-16 * (sum.norm() + floor) {
            run += 1;
            if run == 3 {
                return Ok(SeriesEvaluation {
                    edge: edge.index(),
                    k,
                    derivative: nu,
                    x,
                    lambda,
                    value: sum,
                    terms_used: mu + 1,
                    truncation_estimate: tail.iter().sum(),
                });
            }
        } else {
            run = 0;
        }
    }
    Err(Error::TruncationFailure { terms: cap + 1 })
}

/// `d^nu/dx^nu C_k(x, lambda)` for `nu <= n - 1`, 1-based `k`.
pub fn eval_c(edge: &Edge, k: usize, nu: usize, x: f64, lambda: C64) -> Result<SeriesEvaluation> {
    assert!(nu < edge.order(), "derivative order {nu} exceeds n - 1");
    eval_series(edge, k, nu, x, lambda, MAX_TERMS)
}

/// Fundamental system data at the collar end `x0`: row `k-1`, column `nu`
/// holds `C_k^(nu)(x0, lambda)`.
pub fn basis_at_collar(edge: &Edge, lambda: C64) -> Result<CMatrix> {
    let n = edge.order();
    let x0 = edge.collar();
    let mut w = CMatrix::zeros(n, n);
    for k in 1..=n {
        for nu in 0..n {
            w[(k - 1, nu)] = eval_c(edge, k, nu, x0, lambda)?.value;
        }
    }
    let deviation = (det(&w) - ONE).norm();
    if deviation > COLLAR_WRONSKIAN_TOL {
        return Err(Error::WronskianDeviation { deviation });
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EdgeModel;
    use proptest::prelude::*;

    fn r(x: f64) -> C64 {
        C64::new(x, 0.0)
    }

    fn edge(n: usize, nu: &[f64], collar: f64) -> Edge {
        let nu = nu.iter().map(|&v| r(v)).collect();
        Edge::new(EdgeModel::new(1, n, 1.0, collar, nu, Vec::new()).unwrap()).unwrap()
    }

    fn factorial(m: u32) -> f64 {
        (1..=m).map(f64::from).product()
    }

    #[test]
    fn coefficients_singular() {
        let e = edge(2, &[-2.0], 0.1);
        let c = series_coefficients(&e.indicial, &e.exponents, 2, 2).unwrap();
        assert!((c[0] - ONE).norm() < 1e-15);
        assert!((c[1] - r(0.1)).norm() < 1e-15 * 0.1);
        assert!((c[2] - r(1.0 / 280.0)).norm() < 1e-15 / 280.0);
    }

    #[test]
    fn coefficients_classical_are_inverse_factorials() {
        let e = edge(2, &[0.0], 0.1);
        let even = series_coefficients(&e.indicial, &e.exponents, 1, 8).unwrap();
        let odd = series_coefficients(&e.indicial, &e.exponents, 2, 8).unwrap();
        for mu in 0..=8u32 {
            let want_even = 1.0 / factorial(2 * mu);
            let want_odd = 1.0 / factorial(2 * mu + 1);
            assert!((even[mu as usize] - r(want_even)).norm() <= 1e-14 * want_even);
            assert!((odd[mu as usize] - r(want_odd)).norm() <= 1e-14 * want_odd);
        }
    }

    #[test]
    fn cosh_from_series() {
        let e = edge(2, &[0.0], 0.1);
        let v = eval_c(&e, 1, 0, 0.7, ONE).unwrap();
        assert!((v.value - r(0.7f64.cosh())).norm() < 1e-14);
        assert!(v.truncation_estimate <= 1e-14 * v.value.norm().max(1.0));
        let d = eval_c(&e, 2, 1, 0.7, ONE).unwrap();
        assert!((d.value - r(0.7f64.cosh())).norm() < 1e-14);
    }

    #[test]
    fn singular_leading_behaviour() {
        let e = edge(2, &[-2.0], 0.1);
        let v = eval_c(&e, 2, 0, 1e-3, ONE).unwrap();
        assert!((v.value - r(1e-6)).norm() <= 1e-12 * 1e-6 + 1e-7 * 1e-6);
    }

    #[test]
    fn collar_basis_classical() {
        let e = edge(2, &[0.0], 0.1);
        let w = basis_at_collar(&e, ONE).unwrap();
        let (c, s) = (0.1f64.cosh(), 0.1f64.sinh());
        let want = CMatrix::from_row_slice(2, 2, &[r(c), r(s), r(s), r(c)]);
        assert!((w - want).norm() < 1e-15);
    }

    #[test]
    fn collar_basis_singular_at_zero_lambda() {
        let x0: f64 = 0.05;
        let e = edge(2, &[-2.0], x0);
        let w = basis_at_collar(&e, ZERO).unwrap();
        let want = CMatrix::from_row_slice(
            2,
            2,
            &[r(x0.powi(-1) / 3.0), r(-x0.powi(-2) / 3.0), r(x0 * x0), r(2.0 * x0)],
        );
        assert!((&w - &want).norm() < 1e-12);
        assert!((det(&w) - ONE).norm() < 1e-12);
    }

    #[test]
    fn doubling_terms_does_not_change_value() {
        let e = edge(3, &[3.0, -3.0], 0.2);
        let lambda = C64::new(40.0, -25.0);
        for k in 1..=3 {
            for nu in 0..3 {
                let v = eval_c(&e, k, nu, 0.2, lambda).unwrap();
                let mut sum = ZERO;
                let c = series_coefficients(&e.indicial, &e.exponents, k, 2 * v.terms_used).unwrap();
                let xi = e.exponents.roots[k - 1];
                for (mu, cm) in c.iter().enumerate() {
                    let pw = xi + (3 * mu) as f64 - nu as f64;
                    sum += cm * lambda.powi(mu as i32) * falling(xi + (3 * mu) as f64, nu) * (pw * 0.2f64.ln()).exp();
                }
                assert!((sum - v.value).norm() <= 1e-14 * v.value.norm().max(1e-300));
            }
        }
    }

    fn collar_ode_residual(e: &Edge, x: f64, lambda: C64, k: usize) -> (f64, f64) {
        let n = e.order();
        let derivs: Vec<C64> = (0..=n)
            .map(|nu| eval_series(e, k, nu, x, lambda, MAX_TERMS).unwrap().value)
            .collect();
        let mut res = derivs[n] - lambda * derivs[0];
        let mut scale = derivs[n].norm() + (lambda * derivs[0]).norm();
        for mu in 0..n - 1 {
            let t = e.model.nu[mu] / x.powi((n - mu) as i32) * derivs[mu];
            res += t;
            scale += t.norm();
        }
        (res.norm(), scale)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn collar_wronskian_is_one(
            nu0 in -3.0f64..0.2,
            nu1 in -3.0f64..3.0,
            cubic in proptest::bool::ANY,
            re in -100.0f64..100.0,
            im in -100.0f64..100.0,
            x0 in 0.02f64..0.3,
        ) {
            let lambda = C64::new(re, im);
            prop_assume!(lambda.norm() <= 100.0);
            let e = if cubic {
                EdgeModel::new(1, 3, 1.0, x0, vec![r(nu0), r(nu1)], Vec::new())
            } else {
                EdgeModel::new(1, 2, 1.0, x0, vec![r(nu0)], Vec::new())
            }.unwrap();
            let n = e.order as f64;
            prop_assume!(lambda.norm().powf(1.0 / n) * x0 <= 4.0);
            if let Ok(e) = Edge::new(e) {
                let w = basis_at_collar(&e, lambda).unwrap();
                prop_assert!((det(&w) - ONE).norm() < 1e-9);
            }
        }

        #[test]
        fn series_solves_collar_equation(
            nu0 in -3.0f64..0.2,
            re in -60.0f64..60.0,
            im in -60.0f64..60.0,
            x in 0.05f64..0.4,
        ) {
            let e = edge(2, &[nu0], 0.5);
            let lambda = C64::new(re, im);
            for k in 1..=2 {
                let (res, scale) = collar_ode_residual(&e, x, lambda, k);
                prop_assert!(res <= 1e-8 * scale.max(1e-300), "res {res} scale {scale}");
            }
        }
    }
}
