//! Fundamental system `S_k(x, lambda)` on `[x0, l]`: exact collar data from
//! the series, then adaptive Dormand-Prince 5(4) integration of the
//! companion system with all solutions carried as rows of one matrix.

use crate::error::{Error, Result};
use crate::frobenius::basis_at_collar;
use crate::linalg::{det, thin_qr, CMatrix, C64, ONE};
use crate::model::{Edge, EdgeModel};

/// Largest tolerated `|det W - 1|` after integration.
pub const WRONSKIAN_DRIFT_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationSettings {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// First trial step as a fraction of the interval length.
    pub initial_step_fraction: f64,
}

impl Default for IntegrationSettings {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            max_steps: 200_000,
            initial_step_fraction: 1e-2,
        }
    }
}

/// Row `k-1`, column `nu`: `S_k^(nu)(x, lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisValues {
    pub edge: usize,
    pub lambda: C64,
    pub x: f64,
    pub w: CMatrix,
    pub wronskian_drift: f64,
}

impl BasisValues {
    pub fn order(&self) -> usize {
        self.w.nrows()
    }

    /// `S_k^(nu)`, 1-based `k`.
    pub fn get(&self, k: usize, nu: usize) -> C64 {
        self.w[(k - 1, nu)]
    }
}

/// Scalar coefficients `nu_mu / x^(n-mu) + q_mu(x)` multiplying `y^(mu)`.
fn coefficients(edge: &EdgeModel, x: f64, out: &mut [C64]) {
    let n = edge.order;
    for mu in 0..n - 1 {
        out[mu] = edge.nu[mu] / x.powi((n - mu) as i32) + edge.potential(mu, x);
    }
}

/// Derivative of the state `(y, y', ..., y^(n-1))` at `x`.
pub fn companion_apply(edge: &EdgeModel, lambda: C64, x: f64, v: &[C64]) -> Vec<C64> {
    let n = edge.order;
    assert_eq!(v.len(), n);
    let mut a = vec![C64::default(); n - 1];
    coefficients(edge, x, &mut a);
    let mut out: Vec<C64> = v[1..].to_vec();
    let last = lambda * v[0] - (0..n - 1).map(|mu| a[mu] * v[mu]).sum::<C64>();
    out.push(last);
    out
}

/// Row-wise companion derivative `Y' = Y A^T` for a matrix of states.
fn rhs(edge: &EdgeModel, lambda: C64, x: f64, y: &CMatrix, scratch: &mut [C64], out: &mut CMatrix) {
    let n = edge.order;
    coefficients(edge, x, scratch);
    for r in 0..y.nrows() {
        for i in 0..n - 1 {
            out[(r, i)] = y[(r, i + 1)];
        }
        let mut last = lambda * y[(r, 0)];
        for mu in 0..n - 1 {
            last -= scratch[mu] * y[(r, mu)];
        }
        out[(r, n - 1)] = last;
    }
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

struct Stepper<'a> {
    edge: &'a EdgeModel,
    lambda: C64,
    settings: IntegrationSettings,
    scratch: Vec<C64>,
    k: [CMatrix; 7],
    steps: usize,
    h: f64,
}

impl<'a> Stepper<'a> {
    fn new(edge: &'a EdgeModel, lambda: C64, settings: IntegrationSettings, rows: usize, span: f64) -> Self {
        assert!(settings.rtol > 0.0 && settings.atol > 0.0, "tolerances must be positive");
        let z = || CMatrix::zeros(rows, edge.order);
        Self {
            edge,
            lambda,
            settings,
            scratch: vec![C64::default(); edge.order - 1],
            k: [z(), z(), z(), z(), z(), z(), z()],
            steps: 0,
            h: settings.initial_step_fraction * span,
        }
    }

    fn eval(&mut self, x: f64, y: &CMatrix, slot: usize) {
        let mut out = std::mem::replace(&mut self.k[slot], CMatrix::zeros(0, 0));
        rhs(self.edge, self.lambda, x, y, &mut self.scratch, &mut out);
        self.k[slot] = out;
    }

    fn combine(&self, y: &CMatrix, h: f64, coeffs: &[(usize, f64)]) -> CMatrix {
        let mut out = y.clone();
        for &(slot, a) in coeffs {
            out.zip_apply(&self.k[slot], |o, k| *o += k * (h * a));
        }
        out
    }

    /// Advances `y` from `x` to exactly `x_end`.
    fn advance(&mut self, y: &mut CMatrix, x: &mut f64, x_end: f64) -> Result<()> {
        if *x >= x_end {
            return Ok(());
        }
        let (rtol, atol) = (self.settings.rtol, self.settings.atol);
        self.eval(*x, y, 0);
        loop {
            let remaining = x_end - *x;
            let last = self.h >= remaining;
            let h = if last { remaining } else { self.h };
            if !last && h <= 1e-14 * x.abs().max(1.0) {
                return Err(Error::StepSizeUnderflow { x: *x });
            }
            self.steps += 1;
            if self.steps > self.settings.max_steps {
                return Err(Error::StepLimitExceeded {
                    steps: self.settings.max_steps,
                });
            }
            let y2 = self.combine(y, h, &[(0, A21)]);
            self.eval(*x + C2 * h, &y2, 1);
            let y3 = self.combine(y, h, &[(0, A31), (1, A32)]);
            self.eval(*x + C3 * h, &y3, 2);
            let y4 = self.combine(y, h, &[(0, A41), (1, A42), (2, A43)]);
            self.eval(*x + C4 * h, &y4, 3);
            let y5 = self.combine(y, h, &[(0, A51), (1, A52), (2, A53), (3, A54)]);
            self.eval(*x + C5 * h, &y5, 4);
            let y6 = self.combine(y, h, &[(0, A61), (1, A62), (2, A63), (3, A64), (4, A65)]);
            let x_new = if last { x_end } else { *x + h };
            self.eval(x_new, &y6, 5);
            let y_new = self.combine(y, h, &[(0, B1), (2, B3), (3, B4), (4, B5), (5, B6)]);
            self.eval(x_new, &y_new, 6);
            let err_est = self.combine(
                &CMatrix::zeros(y.nrows(), y.ncols()),
                h,
                &[(0, E1), (2, E3), (3, E4), (4, E5), (5, E6), (6, E7)],
            );
            let mut err: f64 = 0.0;
            for ((e, a), b) in err_est.iter().zip(y.iter()).zip(y_new.iter()) {
                let sc = atol + rtol * a.norm().max(b.norm());
                err = err.max(e.norm() / sc);
            }
            if !err.is_finite() {
                self.h = h * 0.2;
                continue;
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            if err <= 1.0 {
                *y = y_new;
                *x = x_new;
                // FSAL: the last stage is the first of the next step
                self.k.swap(0, 6);
                if !last {
                    self.h = h * factor;
                }
                if last {
                    return Ok(());
                }
            } else {
                self.h = h * factor.min(1.0);
            }
        }
    }
}

fn check_mesh(x0: f64, mesh: &[f64], length: f64) {
    let mut prev = x0;
    for (i, &x) in mesh.iter().enumerate() {
        assert!(
            x >= prev && (i == 0 || x > prev) && x <= length * (1.0 + 1e-12),
            "mesh must be strictly increasing within [x0, l]"
        );
        prev = x;
    }
}

/// Integrates arbitrary initial rows `y0` given at `x_start` and returns their
/// values at each mesh point.
pub fn integrate_rows(
    edge: &EdgeModel,
    lambda: C64,
    y0: &CMatrix,
    x_start: f64,
    mesh: &[f64],
    settings: &IntegrationSettings,
) -> Result<Vec<CMatrix>> {
    assert_eq!(y0.ncols(), edge.order);
    check_mesh(x_start, mesh, edge.length);
    let span = mesh.last().map(|&e| e - x_start).unwrap_or(0.0).max(1e-300);
    let mut stepper = Stepper::new(edge, lambda, *settings, y0.nrows(), span);
    let mut y = y0.clone();
    let mut x = x_start;
    let mut out = Vec::with_capacity(mesh.len());
    for &target in mesh {
        stepper.advance(&mut y, &mut x, target)?;
        out.push(y.clone());
    }
    Ok(out)
}

/// Basis values at each mesh point, starting from the exact collar data.
pub fn integrate_dense(
    edge: &Edge,
    lambda: C64,
    mesh: &[f64],
    settings: &IntegrationSettings,
) -> Result<Vec<BasisValues>> {
    if mesh.is_empty() {
        return Ok(Vec::new());
    }
    let w0 = basis_at_collar(edge, lambda)?;
    let rows = integrate_rows(&edge.model, lambda, &w0, edge.collar(), mesh, settings)?;
    mesh.iter()
        .zip(rows)
        .map(|(&x, w)| {
            let drift = (det(&w) - ONE).norm();
            if drift > WRONSKIAN_DRIFT_TOL {
                return Err(Error::WronskianDrift {
                    edge: edge.index(),
                    drift,
                });
            }
            Ok(BasisValues {
                edge: edge.index(),
                lambda,
                x,
                w,
                wronskian_drift: drift,
            })
        })
        .collect()
}

/// Basis values at the internal vertex `x = l`.
pub fn integrate_basis(edge: &Edge, lambda: C64, settings: &IntegrationSettings) -> Result<BasisValues> {
    let mut v = integrate_dense(edge, lambda, &[edge.length()], settings)?;
    Ok(v.pop().expect("one mesh point"))
}

/// Orthonormalized propagation of a subspace of solutions.
///
/// The true rows satisfy `Y(x_i) = (F_0 F_1 ... F_i) Q_i` where `F_i` are the
/// lower-triangular factors collected at the checkpoints.
#[derive(Debug, Clone)]
pub struct SubspaceTrack {
    pub points: Vec<f64>,
    pub frames: Vec<CMatrix>,
    pub factors: Vec<CMatrix>,
}

impl SubspaceTrack {
    /// Product of the factors strictly after checkpoint `from` up to and
    /// including `to`.
    pub fn transfer(&self, from: usize, to: usize) -> CMatrix {
        let m = self.frames[0].nrows();
        let mut g = CMatrix::identity(m, m);
        for f in &self.factors[from + 1..=to] {
            g *= f;
        }
        g
    }

    /// `prod_i (F_i)_{r,r}`: the diagonal of the accumulated factor up to `to`.
    pub fn diagonal_product(&self, to: usize, r: usize) -> C64 {
        self.factors[..=to].iter().map(|f| f[(r, r)]).product()
    }
}

/// `Y = L Q` with `L` lower triangular and `Q` having orthonormal rows.
fn lq(y: &CMatrix) -> (CMatrix, CMatrix) {
    let (q, r) = thin_qr(&y.transpose());
    (r.transpose(), q.transpose())
}

/// Propagates the row space of `y0` from `x_start` through `mesh`,
/// re-orthonormalizing after every accepted step batch between mesh points
/// and at the mesh points themselves. The first checkpoint is `x_start`.
pub fn integrate_subspace(
    edge: &EdgeModel,
    lambda: C64,
    y0: &CMatrix,
    x_start: f64,
    mesh: &[f64],
    settings: &IntegrationSettings,
) -> Result<SubspaceTrack> {
    assert!(y0.nrows() <= edge.order);
    check_mesh(x_start, mesh, edge.length);
    let (l0, q0) = lq(y0);
    let mut track = SubspaceTrack {
        points: vec![x_start],
        frames: vec![q0.clone()],
        factors: vec![l0],
    };
    let span = mesh.last().map(|&e| e - x_start).unwrap_or(0.0).max(1e-300);
    let mut stepper = Stepper::new(edge, lambda, *settings, y0.nrows(), span);
    // sub-intervals short enough that growth stays moderate between
    // re-orthonormalizations
    let rho = lambda.norm().powf(1.0 / edge.order as f64).max(1.0);
    let max_leg = 2.0 / rho;
    let m = y0.nrows();
    let mut y = q0;
    let mut x = x_start;
    let mut pending = CMatrix::identity(m, m);
    for &target in mesh {
        while x < target {
            let next = if target - x <= 1.5 * max_leg { target } else { x + max_leg };
            stepper.advance(&mut y, &mut x, next)?;
            let (l, q) = lq(&y);
            pending *= l;
            y = q;
        }
        track.points.push(target);
        track.frames.push(y.clone());
        track.factors.push(std::mem::replace(&mut pending, CMatrix::identity(m, m)));
    }
    Ok(track)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ZERO;
    use crate::model::CollaredPolynomial;

    fn r(x: f64) -> C64 {
        C64::new(x, 0.0)
    }

    fn classical(length: f64) -> Edge {
        Edge::new(EdgeModel::classical(1, 2, length, 0.1)).unwrap()
    }

    fn singular() -> Edge {
        Edge::new(EdgeModel::new(1, 2, 1.0, 0.05, vec![r(-2.0)], Vec::new()).unwrap()).unwrap()
    }

    #[test]
    fn companion_examples() {
        let e = EdgeModel::classical(1, 2, 1.0, 0.1);
        assert_eq!(companion_apply(&e, ONE, 0.3, &[ONE, ZERO]), vec![ZERO, ONE]);
        let s = EdgeModel::new(1, 2, 1.0, 0.05, vec![r(-2.0)], Vec::new()).unwrap();
        let d = companion_apply(&s, ZERO, 0.5, &[ONE, ZERO]);
        assert!((d[1] - r(8.0)).norm() < 1e-14);
        let c = EdgeModel::new(1, 3, 1.0, 0.05, vec![r(3.0), r(-3.0)], Vec::new()).unwrap();
        let d = companion_apply(&c, r(2.0), 0.4, &[r(1.0), r(2.0), r(3.0)]);
        assert_eq!(&d[..2], &[r(2.0), r(3.0)]);
    }

    #[test]
    fn classical_basis_is_cosh_sinh() {
        let b = integrate_basis(&classical(1.0), ONE, &IntegrationSettings::default()).unwrap();
        let (c, s) = (1f64.cosh(), 1f64.sinh());
        let want = CMatrix::from_row_slice(2, 2, &[r(c), r(s), r(s), r(c)]);
        assert!((&b.w - &want).norm() < 1e-9, "{}", b.w);
        assert!(b.wronskian_drift < 1e-9);
    }

    #[test]
    fn zero_lambda_bases() {
        let b = integrate_basis(&classical(1.0), ZERO, &IntegrationSettings::default()).unwrap();
        let want = CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ONE, ONE]);
        assert!((&b.w - &want).norm() < 1e-9, "{}", b.w);

        // the singular row is recessive against x^2, so global error is
        // amplified; tighter tolerances resolve it
        let tight = IntegrationSettings {
            rtol: 1e-13,
            atol: 1e-15,
            ..IntegrationSettings::default()
        };
        let b = integrate_basis(&singular(), ZERO, &tight).unwrap();
        let want = CMatrix::from_row_slice(2, 2, &[r(1.0 / 3.0), r(-1.0 / 3.0), r(1.0), r(2.0)]);
        assert!((&b.w - &want).norm() < 1e-9, "{}", b.w);
        assert!((det(&b.w) - ONE).norm() < 1e-9);
    }

    #[test]
    fn dense_output() {
        let e = classical(1.0);
        let set = IntegrationSettings::default();
        assert!(integrate_dense(&e, ONE, &[], &set).unwrap().is_empty());
        let single = integrate_dense(&e, ONE, &[1.0], &set).unwrap();
        assert_eq!(single[0].w, integrate_basis(&e, ONE, &set).unwrap().w);
        let v = integrate_dense(&e, ONE, &[0.5, 1.0], &set).unwrap();
        for b in &v {
            let (c, s) = (b.x.cosh(), b.x.sinh());
            let want = CMatrix::from_row_slice(2, 2, &[r(c), r(s), r(s), r(c)]);
            assert!((&b.w - &want).norm() < 1e-9);
        }
    }

    fn collared_edge(collar: f64) -> Edge {
        let q = CollaredPolynomial::new(0.5, vec![r(1.5), C64::new(-2.0, 0.5), r(3.0)]);
        Edge::new(EdgeModel::new(1, 2, 1.0, collar, vec![r(-1.0)], vec![q]).unwrap()).unwrap()
    }

    #[test]
    fn collar_choice_does_not_matter() {
        let set = IntegrationSettings::default();
        let lambda = C64::new(7.0, -3.0);
        let a = integrate_basis(&collared_edge(0.1), lambda, &set).unwrap();
        let b = integrate_basis(&collared_edge(0.3), lambda, &set).unwrap();
        assert!((&a.w - &b.w).norm() <= 1e-8 * a.w.norm());
    }

    #[test]
    fn integration_is_linear() {
        let e = collared_edge(0.1);
        let set = IntegrationSettings {
            rtol: 1e-12,
            atol: 1e-14,
            ..IntegrationSettings::default()
        };
        let lambda = C64::new(-4.0, 2.0);
        let w0 = basis_at_collar(&e, lambda).unwrap();
        let (a, b) = (C64::new(0.3, -1.2), C64::new(2.0, 0.7));
        let mixed = CMatrix::from_fn(1, 2, |_, c| a * w0[(0, c)] + b * w0[(1, c)]);
        let got = &integrate_rows(&e.model, lambda, &mixed, 0.1, &[1.0], &set).unwrap()[0];
        let w = integrate_basis(&e, lambda, &set).unwrap().w;
        let want = CMatrix::from_fn(1, 2, |_, c| a * w[(0, c)] + b * w[(1, c)]);
        let rel = (got - &want).norm() / want.norm();
        assert!(rel <= 1e-9, "{rel:e}");
    }

    #[test]
    fn entire_in_lambda() {
        // Cauchy integral over a circle reproduces the centre value and the
        // Wronskian stays 1 along the contour.
        let e = collared_edge(0.1);
        let set = IntegrationSettings::default();
        let centre = C64::new(3.0, 1.0);
        let radius = 0.5;
        let m = 32;
        let mut acc = CMatrix::zeros(2, 2);
        let mut winding = 0.0;
        let mut prev_det: Option<C64> = None;
        for i in 0..=m {
            let t = std::f64::consts::TAU * i as f64 / m as f64;
            let lam = centre + C64::from_polar(radius, t);
            let w = integrate_basis(&e, lam, &set).unwrap().w;
            let d = det(&w);
            assert!((d - ONE).norm() < 1e-7);
            if let Some(p) = prev_det {
                winding += (d / p).arg();
            }
            prev_det = Some(d);
            if i < m {
                // trapezoid rule for (1 / 2 pi i) oint W / (lam - centre) dlam
                acc += w * C64::new(1.0 / m as f64, 0.0);
            }
        }
        assert!(winding.abs() < 1e-6);
        let direct = integrate_basis(&e, centre, &set).unwrap().w;
        assert!((&acc - &direct).norm() <= 1e-6 * direct.norm());
    }

    #[test]
    fn subspace_tracks_row_space() {
        let e = classical(1.0);
        let set = IntegrationSettings::default();
        let lambda = r(400.0);
        let w0 = basis_at_collar(&e, lambda).unwrap();
        let track = integrate_subspace(&e.model, lambda, &w0, 0.1, &[0.6, 1.0], &set).unwrap();
        let full = integrate_rows(&e.model, lambda, &w0, 0.1, &[0.6, 1.0], &set).unwrap();
        for (i, y) in full.iter().enumerate() {
            let l = track.transfer(0, i + 1);
            let rebuilt = &track.factors[0] * l * &track.frames[i + 1];
            assert!((&rebuilt - y).norm() <= 1e-9 * y.norm());
        }
    }
}
