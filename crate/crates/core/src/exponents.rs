//! Indicial polynomials, Frobenius exponents and leading coefficients.

use crate::error::{AdmissibilityReason, Error, Result};
use crate::linalg::{C64, ONE, ZERO};
use crate::model::EdgeModel;

/// Tolerance shared by the three admissibility exclusions.
pub const ADMISSIBILITY_TOL: f64 = 1e-8;

const DK_TOL: f64 = 1e-13;
const DK_MAX_ITER: usize = 500;

/// `delta(xi) = sum_mu nu_mu prod_{k<mu} (xi - k)` with `nu_n = 1`, `nu_{n-1} = 0`,
/// kept in both the falling-factorial and the monomial basis.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicialPolynomial {
    order: usize,
    falling: Vec<C64>,
    monomial: Vec<C64>,
}

/// Monomial coefficients of `xi (xi - 1) ... (xi - m + 1)`.
fn falling_factorial_coeffs(m: usize) -> Vec<f64> {
    let mut c = vec![1.0];
    for k in 0..m {
        let mut next = vec![0.0; c.len() + 1];
        for (i, &a) in c.iter().enumerate() {
            next[i + 1] += a;
            next[i] -= a * k as f64;
        }
        c = next;
    }
    c
}

impl IndicialPolynomial {
    /// From `nu_0 .. nu_{n-2}`; the two top coefficients are forced.
    pub fn from_singular_coefficients(order: usize, nu: &[C64]) -> Self {
        assert!(order >= 2 && nu.len() == order - 1);
        let mut falling: Vec<C64> = nu.to_vec();
        falling.push(ZERO);
        falling.push(ONE);
        let mut monomial = vec![ZERO; order + 1];
        for (mu, &coef) in falling.iter().enumerate() {
            for (i, a) in falling_factorial_coeffs(mu).into_iter().enumerate() {
                monomial[i] += coef * a;
            }
        }
        Self {
            order,
            falling,
            monomial,
        }
    }

    /// From monic monomial coefficients `d_0 .. d_n` (`d_n = 1`). The
    /// falling-factorial form is recovered by triangular conversion; the
    /// `nu_{n-1} = 0` constraint is not imposed.
    pub fn from_monomial(monomial: Vec<C64>) -> Self {
        let order = monomial.len() - 1;
        assert!(order >= 1 && monomial[order] == ONE, "monomial form must be monic");
        let mut rest = monomial.clone();
        let mut falling = vec![ZERO; order + 1];
        for mu in (0..=order).rev() {
            let coef = rest[mu];
            falling[mu] = coef;
            for (i, a) in falling_factorial_coeffs(mu).into_iter().enumerate() {
                rest[i] -= coef * a;
            }
        }
        Self {
            order,
            falling,
            monomial,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// `nu_0 .. nu_n`.
    pub fn falling(&self) -> &[C64] {
        &self.falling
    }

    /// `d_0 .. d_n`.
    pub fn monomial(&self) -> &[C64] {
        &self.monomial
    }

    /// Horner evaluation of the monomial form.
    pub fn eval(&self, xi: C64) -> C64 {
        self.monomial.iter().rev().fold(ZERO, |acc, &d| acc * xi + d)
    }

    /// Direct evaluation of the falling-factorial form.
    pub fn eval_falling(&self, xi: C64) -> C64 {
        let mut prod = ONE;
        let mut sum = ZERO;
        for (mu, &coef) in self.falling.iter().enumerate() {
            sum += coef * prod;
            prod *= xi - mu as f64;
        }
        sum
    }
}

pub fn build_indicial(edge: &EdgeModel) -> IndicialPolynomial {
    IndicialPolynomial::from_singular_coefficients(edge.order, &edge.nu)
}

pub fn indicial_eval(p: &IndicialPolynomial, xi: C64) -> C64 {
    p.eval(xi)
}

/// How the product constraint on the leading coefficients is distributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LeadingConvention {
    /// `c_{k0} = 1` for `k >= 2`, `c_{10}` absorbs the inverse Vandermonde
    /// determinant.
    #[default]
    FirstAbsorbsVandermonde,
}

/// Exponents sorted by ascending real part with their leading coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ExponentSet {
    pub roots: Vec<C64>,
    pub leading: Vec<C64>,
    pub theta: f64,
    pub vandermonde: C64,
}

impl ExponentSet {
    pub fn order(&self) -> usize {
        self.roots.len()
    }
}

/// All roots of a monic polynomial `d_0 + d_1 z + ... + z^n` by
/// simultaneous (Weierstrass / Durand-Kerner) iteration.
pub fn durand_kerner(monomial: &[C64]) -> Result<Vec<C64>> {
    let n = monomial.len() - 1;
    assert!(n >= 1 && monomial[n] == ONE);
    let eval = |z: C64| monomial.iter().rev().fold(ZERO, |acc, &d| acc * z + d);
    let radius = 1.0 + monomial[..n].iter().map(|d| d.norm()).fold(0.0, f64::max);
    // offset angle avoids symmetric starts for real polynomials
    let mut z: Vec<C64> = (0..n)
        .map(|k| C64::from_polar(radius, std::f64::consts::TAU * k as f64 / n as f64 + 0.4))
        .collect();
    for _ in 0..DK_MAX_ITER {
        let mut max_update: f64 = 0.0;
        for i in 0..n {
            let mut denom = ONE;
            for j in 0..n {
                if i != j {
                    denom *= z[i] - z[j];
                }
            }
            if denom == ZERO {
                // coincident iterates: nudge apart
                z[i] += C64::new(1e-8, 1e-8) * radius;
                max_update = f64::INFINITY;
                continue;
            }
            let step = eval(z[i]) / denom;
            z[i] -= step;
            max_update = max_update.max(step.norm() / z[i].norm().max(1.0));
        }
        if max_update <= DK_TOL {
            return Ok(z);
        }
    }
    Err(Error::NonConvergence {
        iterations: DK_MAX_ITER,
    })
}

fn admissibility(order: usize, roots: &[C64]) -> Result<()> {
    let violation = |reason| {
        Err(Error::AdmissibilityViolation {
            reason,
            edge: None,
        })
    };
    for w in roots.windows(2) {
        if w[1].re - w[0].re < ADMISSIBILITY_TOL {
            return violation(AdmissibilityReason::RealPartCollision);
        }
    }
    let nf = order as f64;
    for (a, &xa) in roots.iter().enumerate() {
        for &xb in &roots[a + 1..] {
            let d = xb - xa;
            let nearest = (d.re / nf).round() * nf;
            if (d - nearest).norm() < ADMISSIBILITY_TOL {
                return violation(AdmissibilityReason::DifferenceMultipleOfN);
            }
        }
    }
    for &xi in roots {
        for m in 0..order.saturating_sub(2) {
            if (xi - m as f64).norm() < ADMISSIBILITY_TOL {
                return violation(AdmissibilityReason::ForbiddenIntegerExponent);
            }
        }
    }
    Ok(())
}

pub fn solve_exponents(p: &IndicialPolynomial, convention: LeadingConvention) -> Result<ExponentSet> {
    let n = p.order();
    let mut roots = durand_kerner(p.monomial())?;
    for &xi in &roots {
        let bound = 1e-10 * xi.norm().powi(n as i32).max(1.0);
        if p.eval(xi).norm() > bound {
            return Err(Error::NonConvergence {
                iterations: DK_MAX_ITER,
            });
        }
    }
    roots.sort_by(|a, b| a.re.total_cmp(&b.re));
    admissibility(n, &roots)?;

    let mut vandermonde = ONE;
    for i in 0..n {
        for j in i + 1..n {
            vandermonde *= roots[j] - roots[i];
        }
    }
    let leading = match convention {
        LeadingConvention::FirstAbsorbsVandermonde => {
            let mut c = vec![ONE; n];
            c[0] = ONE / vandermonde;
            c
        }
    };
    let theta = (n - 1) as f64 - (roots[n - 1] - roots[0]).re;
    Ok(ExponentSet {
        roots,
        leading,
        theta,
        vandermonde,
    })
}
