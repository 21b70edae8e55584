//! Small dense complex linear algebra on top of `nalgebra`.
//!
//! All matrices in this crate are tiny (at most a few dozen rows), so the
//! helpers favour clarity over blocking: explicit inverses are used for
//! condition estimates and nothing is cached.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);

pub fn det(a: &CMatrix) -> C64 {
    assert!(a.is_square(), "determinant of a non-square matrix");
    if a.nrows() == 0 {
        return ONE;
    }
    a.clone().lu().determinant()
}

fn row_norm(a: &CMatrix, i: usize) -> f64 {
    a.row(i).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// |det A| divided by the product of the Euclidean row norms (Hadamard
/// ratio). Lies in [0, 1]; zero exactly for singular matrices.
pub fn hadamard_ratio(a: &CMatrix) -> f64 {
    let mut denom = 1.0;
    for i in 0..a.nrows() {
        let r = row_norm(a, i);
        if r == 0.0 {
            return 0.0;
        }
        denom *= r;
    }
    det(a).norm() / denom
}

fn one_norm(a: &CMatrix) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Row and column equilibration factors (powers of two, so scaling is exact).
fn equilibrate(a: &CMatrix) -> (Vec<f64>, Vec<f64>) {
    let pow2 = |v: f64| if v > 0.0 && v.is_finite() { 2f64.powi(-(v.log2().round() as i32)) } else { 1.0 };
    let rows: Vec<f64> = (0..a.nrows())
        .map(|i| pow2(a.row(i).iter().map(|z| z.norm()).fold(0.0, f64::max)))
        .collect();
    let cols: Vec<f64> = (0..a.ncols())
        .map(|j| {
            pow2(
                (0..a.nrows())
                    .map(|i| (a[(i, j)] * rows[i]).norm())
                    .fold(0.0, f64::max),
            )
        })
        .collect();
    (rows, cols)
}

/// Outcome of a square solve with diagnostics.
#[derive(Debug, Clone)]
pub struct Solved {
    pub x: CVector,
    pub det: C64,
    /// 1-norm condition number after column equilibration. Rows are left
    /// unscaled so that an equation which degenerates as a whole still shows.
    pub condition: f64,
    /// Relative residual ||Ax - b|| / (||A|| ||x|| + ||b||).
    pub residual: f64,
}

/// Solves `A x = b` by LU with partial pivoting after exact power-of-two
/// equilibration. Fails only on exact (or non-finite) singularity; near
/// singularity is reported through `condition`.
pub fn solve(a: &CMatrix, b: &CVector, context: &str) -> Result<Solved> {
    assert!(a.is_square() && a.nrows() == b.len());
    let n = a.nrows();
    let singular = || Error::SingularSystem {
        context: context.to_string(),
    };
    if n == 0 {
        return Ok(Solved {
            x: CVector::zeros(0),
            det: ONE,
            condition: 1.0,
            residual: 0.0,
        });
    }
    let (rs, cs) = equilibrate(a);
    let scaled = CMatrix::from_fn(n, n, |i, j| a[(i, j)] * rs[i] * cs[j]);
    let lu = scaled.clone().lu();
    let inv = lu.try_inverse().ok_or_else(singular)?;
    if inv.iter().any(|z| !z.is_finite()) {
        return Err(singular());
    }
    let condition = column_condition(&scaled, &inv, &rs);
    let sb = CVector::from_fn(n, |i, _| b[i] * rs[i]);
    let y = lu.solve(&sb).ok_or_else(singular)?;
    let x = CVector::from_fn(n, |j, _| y[j] * cs[j]);
    if x.iter().any(|z| !z.is_finite()) {
        return Err(singular());
    }
    let r = a * &x - b;
    let scale = a.norm() * x.norm() + b.norm();
    let residual = if scale > 0.0 { r.norm() / scale } else { 0.0 };
    Ok(Solved {
        x,
        det: det(a),
        condition,
        residual,
    })
}

/// `kappa_1(A D_c)` from `S = D_r A D_c` and `S^{-1}`:
/// `A D_c = D_r^{-1} S` and `(A D_c)^{-1} = S^{-1} D_r`.
fn column_condition(scaled: &CMatrix, inv: &CMatrix, rs: &[f64]) -> f64 {
    let n = scaled.nrows();
    let left = CMatrix::from_fn(n, n, |i, j| scaled[(i, j)] / rs[i]);
    let right = CMatrix::from_fn(n, n, |i, j| inv[(i, j)] * rs[j]);
    one_norm(&left) * one_norm(&right)
}

/// Condition number as computed by [`solve`], or infinity when singular.
pub fn condition(a: &CMatrix) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 1.0;
    }
    let (rs, cs) = equilibrate(a);
    let scaled = CMatrix::from_fn(n, n, |i, j| a[(i, j)] * rs[i] * cs[j]);
    match scaled.clone().try_inverse() {
        Some(inv) if inv.iter().all(|z| z.is_finite()) => column_condition(&scaled, &inv, &rs),
        _ => f64::INFINITY,
    }
}

/// Orthonormal basis (columns) of the approximate null space of `a`,
/// taking the `dim` right singular vectors with smallest singular values.
/// Returns the basis and the largest discarded-vs-kept singular value ratio.
pub fn null_space(a: &CMatrix, dim: usize) -> (CMatrix, f64) {
    let (m, n) = a.shape();
    assert!(dim <= n);
    // pad to square so the SVD yields a full set of right singular vectors
    let size = m.max(n);
    let padded = CMatrix::from_fn(size, n, |i, j| if i < m { a[(i, j)] } else { ZERO });
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let kept = &order[order.len() - dim..];
    let basis = CMatrix::from_fn(n, dim, |i, c| vt[(kept[c], i)].conj());
    let largest = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let smallest_kept_out = order[..order.len() - dim]
        .iter()
        .map(|&i| svd.singular_values[i])
        .fold(f64::INFINITY, f64::min);
    let biggest_null = kept.iter().map(|&i| svd.singular_values[i]).fold(0.0, f64::max);
    let gap = if largest > 0.0 && smallest_kept_out.is_finite() && smallest_kept_out > 0.0 {
        biggest_null / smallest_kept_out
    } else {
        0.0
    };
    (basis, gap)
}

/// Thin QR of a tall matrix: returns (Q, R) with orthonormal columns in Q.
pub fn thin_qr(y: &CMatrix) -> (CMatrix, CMatrix) {
    let qr = y.clone().qr();
    (qr.q(), qr.r())
}
