//! Branch conventions for complex powers and the sector ordering of the
//! n-th roots of unity.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::exponents::ExponentSet;
use crate::linalg::{det, CMatrix, C64, ONE};

/// Minimum separation between consecutive `Re(rho R_k)` values.
pub const SECTOR_MARGIN: f64 = 1e-9;
/// `|Omega_k|` below this is treated as degenerate.
pub const OMEGA_FLOOR: f64 = 1e-12;

/// Ordering `Re(rho R_1) < ... < Re(rho R_n)` of the roots of `R^n = 1`
/// at a representative `arg rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorFrame {
    pub order: usize,
    pub sector: i64,
    /// `R_k = exp(2 pi i eta_k / n)`.
    pub eta: Vec<usize>,
    pub roots: Vec<C64>,
    pub arg: f64,
}

impl SectorFrame {
    /// `R_k^mu = exp(2 pi i mu eta_k / n)`, 1-based `k`.
    pub fn root_power(&self, k: usize, mu: C64) -> C64 {
        root_power(self, k, mu)
    }
}

pub fn sector_frame(n: usize, arg: f64) -> Result<SectorFrame> {
    assert!(n >= 1);
    if !(arg > -PI && arg <= PI) {
        return Err(Error::ArgumentOutOfRange { arg });
    }
    let rho = C64::from_polar(1.0, arg);
    let mut keyed: Vec<(f64, usize)> = (0..n)
        .map(|m| ((rho * C64::from_polar(1.0, TAU * m as f64 / n as f64)).re, m))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    if keyed.windows(2).any(|w| w[1].0 - w[0].0 <= SECTOR_MARGIN) {
        return Err(Error::BoundaryArgument { arg });
    }
    let eta: Vec<usize> = keyed.iter().map(|&(_, m)| m).collect();
    let roots = eta
        .iter()
        .map(|&m| C64::from_polar(1.0, TAU * m as f64 / n as f64))
        .collect();
    Ok(SectorFrame {
        order: n,
        sector: (arg * n as f64 / PI).floor() as i64,
        eta,
        roots,
        arg,
    })
}

/// Principal argument in `(-pi, pi]`; `-0.0` imaginary parts map to `+pi`.
pub fn principal_arg(z: C64) -> f64 {
    let a = z.im.atan2(z.re);
    if a <= -PI {
        PI
    } else {
        a
    }
}

/// `rho^mu = exp(mu (ln|rho| + i arg rho))`, `arg rho in (-pi, pi]`.
pub fn complex_power(rho: C64, mu: C64) -> Result<C64> {
    if rho.norm() == 0.0 {
        return Err(Error::ZeroBase);
    }
    let log = C64::new(rho.norm().ln(), principal_arg(rho));
    Ok((mu * log).exp())
}

pub fn root_power(frame: &SectorFrame, k: usize, mu: C64) -> C64 {
    assert!((1..=frame.order).contains(&k), "root index {k} out of range");
    let phase = TAU * frame.eta[k - 1] as f64 / frame.order as f64;
    (C64::new(0.0, phase) * mu).exp()
}

/// `Omega_0..Omega_n` and `omega_1..omega_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaConstants {
    pub big: Vec<C64>,
    pub small: Vec<C64>,
}

impl OmegaConstants {
    /// `omega_k`, 1-based.
    pub fn omega(&self, k: usize) -> C64 {
        self.small[k - 1]
    }
}

pub fn omega_constants(frame: &SectorFrame, exps: &ExponentSet) -> Result<OmegaConstants> {
    let n = frame.order;
    assert_eq!(exps.order(), n);
    let mut big = vec![ONE];
    for k in 1..=n {
        let m = CMatrix::from_fn(k, k, |l, mu| root_power(frame, l + 1, exps.roots[mu]));
        let d = det(&m);
        if d.norm() < OMEGA_FLOOR {
            return Err(Error::DegenerateOmega { k, magnitude: d.norm() });
        }
        big.push(d);
    }
    let small = (1..=n).map(|k| big[k - 1] / big[k]).collect();
    Ok(OmegaConstants { big, small })
}
