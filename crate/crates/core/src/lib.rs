//! Fundamental systems, Weyl-type matrices and characteristic functions for
//! higher-order differential operators with regular singularities on star
//! graphs, and recovery of the internal Weyl matrix of one edge from the
//! boundary Weyl matrices of the others.

pub mod cli;
pub mod error;
pub mod exponents;
pub mod frobenius;
pub mod linalg;
pub mod model;
pub mod propagate;
pub mod reconstruct;
pub mod sectors;
pub mod stargraph;

pub use error::{AdmissibilityReason, Error, Result};
pub use linalg::{CMatrix, CVector, C64};
