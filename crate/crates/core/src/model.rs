//! Edge and graph descriptions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exponents::{build_indicial, solve_exponents, ExponentSet, IndicialPolynomial, LeadingConvention};
use crate::linalg::{C64, ZERO};

/// A polynomial switched on at `start`: zero on `[0, start]`, and
/// `sum a_i (x - start)^i` beyond it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollaredPolynomial {
    pub start: f64,
    pub coeffs: Vec<C64>,
}

impl CollaredPolynomial {
    pub fn zero() -> Self {
        Self {
            start: 0.0,
            coeffs: Vec::new(),
        }
    }

    pub fn new(start: f64, coeffs: Vec<C64>) -> Self {
        Self { start, coeffs }
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| *c == ZERO)
    }

    pub fn eval(&self, x: f64) -> C64 {
        if x <= self.start || self.coeffs.is_empty() {
            return ZERO;
        }
        let t = x - self.start;
        self.coeffs.iter().rev().fold(ZERO, |acc, &a| acc * t + a)
    }
}

/// One edge of the star: `y^(n) + sum_mu (nu_mu / x^(n-mu) + q_mu(x)) y^(mu) = lambda y`
/// on `(0, length)`, with the singular end at `x = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeModel {
    /// 1-based edge index.
    pub index: usize,
    pub length: f64,
    pub order: usize,
    /// Singular coefficients `nu_0 .. nu_{n-2}`.
    pub nu: Vec<C64>,
    /// Potential components `q_0 .. q_{n-2}`.
    pub potentials: Vec<CollaredPolynomial>,
    /// Integration start; potentials vanish on `[0, collar]`.
    pub collar: f64,
}

impl EdgeModel {
    pub fn new(
        index: usize,
        order: usize,
        length: f64,
        collar: f64,
        nu: Vec<C64>,
        potentials: Vec<CollaredPolynomial>,
    ) -> Result<Self> {
        let potentials = if potentials.is_empty() {
            vec![CollaredPolynomial::zero(); order.saturating_sub(1)]
        } else {
            potentials
        };
        let edge = Self {
            index,
            length,
            order,
            nu,
            potentials,
            collar,
        };
        edge.validate()?;
        Ok(edge)
    }

    /// Potential-free edge with all singular coefficients zero.
    pub fn classical(index: usize, order: usize, length: f64, collar: f64) -> Self {
        Self::new(index, order, length, collar, vec![ZERO; order - 1], Vec::new())
            .expect("classical edge parameters must be valid")
    }

    fn validate(&self) -> Result<()> {
        let j = self.index;
        let bad = |msg: String| Err(Error::InvalidModel(format!("edge {j}: {msg}")));
        if self.order < 2 {
            return bad(format!("order {} < 2", self.order));
        }
        if !(self.length.is_finite() && self.length > 0.0) {
            return bad(format!("length {} must be positive", self.length));
        }
        if !(self.collar > 0.0 && self.collar < self.length) {
            return bad(format!("collar {} must lie in (0, {})", self.collar, self.length));
        }
        if self.nu.len() != self.order - 1 {
            return bad(format!("expected {} singular coefficients, got {}", self.order - 1, self.nu.len()));
        }
        if self.nu.iter().any(|z| !z.is_finite()) {
            return bad("non-finite singular coefficient".into());
        }
        if self.potentials.len() != self.order - 1 {
            return bad(format!(
                "expected {} potential components, got {}",
                self.order - 1,
                self.potentials.len()
            ));
        }
        for (mu, q) in self.potentials.iter().enumerate() {
            if q.coeffs.iter().any(|z| !z.is_finite()) || !q.start.is_finite() {
                return bad(format!("potential q_{mu} has non-finite data"));
            }
            if !q.is_zero() && q.start < self.collar {
                return bad(format!(
                    "potential q_{mu} switches on at {} inside the collar [0, {}]",
                    q.start, self.collar
                ));
            }
        }
        Ok(())
    }

    pub fn potential(&self, mu: usize, x: f64) -> C64 {
        self.potentials[mu].eval(x)
    }
}

/// An edge together with its indicial data, computed once.
#[derive(Debug, Clone)]
pub struct Edge {
    pub model: EdgeModel,
    pub indicial: IndicialPolynomial,
    pub exponents: ExponentSet,
}

impl Edge {
    pub fn new(model: EdgeModel) -> Result<Self> {
        let indicial = build_indicial(&model);
        let exponents = solve_exponents(&indicial, LeadingConvention::default()).map_err(|e| e.with_edge(model.index))?;
        Ok(Self {
            model,
            indicial,
            exponents,
        })
    }

    pub fn order(&self) -> usize {
        self.model.order
    }

    pub fn index(&self) -> usize {
        self.model.index
    }

    pub fn length(&self) -> f64 {
        self.model.length
    }

    pub fn collar(&self) -> f64 {
        self.model.collar
    }
}

/// Lower-triangular coefficients `gamma[nu][mu]`, `mu <= nu`, of the linear
/// forms `U_nu(y) = sum_mu gamma[nu][mu] y^(mu)(l)` at the internal vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct FormCoefficients {
    rows: Vec<Vec<C64>>,
}

impl FormCoefficients {
    pub fn identity(order: usize) -> Self {
        let rows = (0..order)
            .map(|nu| (0..=nu).map(|mu| if mu == nu { C64::new(1.0, 0.0) } else { ZERO }).collect())
            .collect();
        Self { rows }
    }

    /// Builds from rows; row `nu` must have exactly `nu + 1` entries.
    pub fn from_rows(rows: Vec<Vec<C64>>) -> Result<Self> {
        for (nu, row) in rows.iter().enumerate() {
            if row.len() != nu + 1 {
                return Err(Error::Schema(format!(
                    "gamma row {nu} has {} entries, expected {}",
                    row.len(),
                    nu + 1
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn order(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, nu: usize, mu: usize) -> C64 {
        if mu > nu {
            ZERO
        } else {
            self.rows[nu][mu]
        }
    }

    pub fn rows(&self) -> &[Vec<C64>] {
        &self.rows
    }
}

/// Star graph with `p` edges joined at the internal vertex.
#[derive(Debug, Clone)]
pub struct GraphModel {
    order: usize,
    edges: Vec<Edge>,
    gamma: Vec<FormCoefficients>,
}

impl GraphModel {
    pub fn new(edges: Vec<EdgeModel>, gamma: Vec<FormCoefficients>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::InvalidModel(format!("a star needs at least 2 edges, got {}", edges.len())));
        }
        let order = edges[0].order;
        if gamma.len() != edges.len() {
            return Err(Error::InvalidModel(format!(
                "{} gamma blocks for {} edges",
                gamma.len(),
                edges.len()
            )));
        }
        for (pos, e) in edges.iter().enumerate() {
            if e.order != order {
                return Err(Error::InvalidModel(format!(
                    "edge {} has order {}, graph order is {order}",
                    e.index, e.order
                )));
            }
            if e.index != pos + 1 {
                return Err(Error::InvalidModel(format!(
                    "edge at position {} carries index {}",
                    pos + 1,
                    e.index
                )));
            }
        }
        for (pos, g) in gamma.iter().enumerate() {
            if g.order() != order {
                return Err(Error::InvalidModel(format!(
                    "gamma for edge {} has {} rows, expected {order}",
                    pos + 1,
                    g.order()
                )));
            }
            for nu in 0..order {
                if g.get(nu, nu).norm() == 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "gamma diagonal vanishes on edge {} for nu = {nu}",
                        pos + 1
                    )));
                }
            }
        }
        let edges = edges.into_iter().map(Edge::new).collect::<Result<Vec<_>>>()?;
        Ok(Self { order, edges, gamma })
    }

    /// Star with identity matching forms.
    pub fn with_identity_forms(edges: Vec<EdgeModel>) -> Result<Self> {
        let order = edges.first().map(|e| e.order).unwrap_or(2);
        let gamma = vec![FormCoefficients::identity(order); edges.len()];
        Self::new(edges, gamma)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edge by 1-based index.
    pub fn edge(&self, j: usize) -> &Edge {
        &self.edges[j - 1]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn gamma(&self, j: usize) -> &FormCoefficients {
        &self.gamma[j - 1]
    }

    pub fn gammas(&self) -> &[FormCoefficients] {
        &self.gamma
    }

    /// Copy with the potential on edge `j` removed. Used to make sure a
    /// computation cannot see `q_j`.
    pub fn without_potential(&self, j: usize) -> Self {
        self.check_vertex(j);
        let mut out = self.clone();
        let edge = &mut out.edges[j - 1];
        let n = edge.model.order;
        edge.model.potentials = vec![CollaredPolynomial::zero(); n - 1];
        out
    }

    /// Panics unless `1 <= j <= p`.
    pub(crate) fn check_vertex(&self, j: usize) {
        assert!(
            (1..=self.edges.len()).contains(&j),
            "vertex index {j} outside 1..={}",
            self.edges.len()
        );
    }
}
