//! Recovery of the internal Weyl matrix `m_N` of one edge from the Weyl
//! matrices `M_s`, `s != N`, and the potentials on the other edges.
//!
//! Per grid point the pipeline runs: boundary values of `psi_{sks}` on the
//! source edge, continuity through the vertex for `nu < k`, the `sigma`
//! systems on the remaining known edges, the Kirchhoff sums for the missing
//! derivatives on edge `N`, and finally the determinant ratios giving `m_N`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{det, solve, CMatrix, CVector, C64, ONE, ZERO};
use crate::model::GraphModel;
use crate::propagate::{integrate_basis, BasisValues, IntegrationSettings};
use crate::stargraph::{direct_internal_weyl, eval_uform, invert_uchain, weyl_record, InternalWeylMatrix, WeylRecord};

/// Condition estimate above which a sigma system or denominator is treated
/// as singular.
pub const SINGULAR_CONDITION: f64 = 1e10;
/// Determinant relative to the product of the full row norms below which a
/// sigma system or denominator is treated as singular.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// `|det a| / prod_i |full_i|`, where `full_i` is the complete row that row
/// `i` of `a` was cut from.
fn relative_determinant(a: &CMatrix, full: impl Iterator<Item = f64>) -> f64 {
    let scale: f64 = full.product();
    if scale == 0.0 {
        return 0.0;
    }
    det(a).norm() / scale
}

/// Boundary values `psi_{skj}^(nu)(l_j)` with a mask of which `nu` are known.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiBoundaryData {
    pub s: usize,
    pub k: usize,
    pub j: usize,
    pub lambda: C64,
    pub values: Vec<C64>,
    pub filled: Vec<bool>,
}

impl PsiBoundaryData {
    fn empty(s: usize, k: usize, j: usize, lambda: C64, n: usize) -> Self {
        Self {
            s,
            k,
            j,
            lambda,
            values: vec![ZERO; n],
            filled: vec![false; n],
        }
    }

    fn full(s: usize, k: usize, j: usize, lambda: C64, values: Vec<C64>) -> Self {
        let n = values.len();
        Self {
            s,
            k,
            j,
            lambda,
            values,
            filled: vec![true; n],
        }
    }

    pub fn is_complete(&self) -> bool {
        self.filled.iter().all(|&f| f)
    }

    /// Number of leading derivatives known.
    fn known_prefix(&self) -> usize {
        self.filled.iter().take_while(|&&f| f).count()
    }
}

/// Values of `psi_{sks}` at `l_s`: `S_k + sum_{mu > k} M_{sk mu} S_mu`.
/// `m` is the unit upper-triangular `M_s(lambda)`.
pub fn step_edge_s(m: &CMatrix, s: usize, k: usize, basis: &BasisValues) -> PsiBoundaryData {
    let n = basis.order();
    let values = (0..n)
        .map(|nu| basis.get(k, nu) + (k + 1..=n).map(|mu| m[(k - 1, mu - 1)] * basis.get(mu, nu)).sum::<C64>())
        .collect();
    PsiBoundaryData::full(s, k, basis.edge, basis.lambda, values)
}

/// `psi_{skj}^(nu)(l_j)`, `nu < k`, for every `j != s` (ascending), from the
/// continuity conditions `U_{j nu}(psi_j) = U_{s nu}(psi_s)`.
pub fn propagate_matching(model: &GraphModel, source: &PsiBoundaryData) -> Vec<PsiBoundaryData> {
    let n = model.order();
    let (s, k) = (source.s, source.k);
    assert!(source.is_complete(), "source data must be complete");
    let u: Vec<C64> = (0..k).map(|nu| eval_uform(model.gamma(s), &source.values, nu)).collect();
    (1..=model.edge_count())
        .filter(|&j| j != s)
        .map(|j| {
            let mut out = PsiBoundaryData::empty(s, k, j, source.lambda, n);
            for (nu, v) in invert_uchain(model.gamma(j), &u).into_iter().enumerate() {
                out.values[nu] = v;
                out.filled[nu] = true;
            }
            out
        })
        .collect()
}

/// Solution of one `sigma_{skj}` system.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSolution {
    pub psi: PsiBoundaryData,
    /// `M_{skj mu}` for `mu = n-k+1..n`.
    pub coefficients: Vec<C64>,
    pub condition: f64,
}

/// Completes `psi_{skj}` on a known edge from its first `k` derivatives.
pub fn solve_sigma(partial: &PsiBoundaryData, basis: &BasisValues) -> Result<SigmaSolution> {
    let n = basis.order();
    let (k, j) = (partial.k, partial.j);
    assert_eq!(basis.edge, j, "basis belongs to another edge");
    assert!(partial.known_prefix() >= k, "sigma system needs nu = 0..k-1");
    let first = n - k + 1;
    let a = CMatrix::from_fn(k, k, |nu, c| basis.get(first + c, nu));
    let b = CVector::from_iterator(k, partial.values[..k].iter().copied());
    let rows = (0..k).map(|nu| (1..=n).map(|mu| basis.get(mu, nu).norm_sqr()).sum::<f64>().sqrt());
    if !(relative_determinant(&a, rows) >= DENOMINATOR_FLOOR) {
        return Err(Error::SigmaSingular { edge: j });
    }
    let solved = solve(&a, &b, "sigma").map_err(|_| Error::SigmaSingular { edge: j })?;
    if !(solved.condition <= SINGULAR_CONDITION) {
        return Err(Error::SigmaSingular { edge: j });
    }
    let coefficients: Vec<C64> = solved.x.iter().copied().collect();
    let values = (0..n)
        .map(|nu| coefficients.iter().enumerate().map(|(c, &m)| m * basis.get(first + c, nu)).sum())
        .collect();
    Ok(SigmaSolution {
        psi: PsiBoundaryData::full(partial.s, k, j, partial.lambda, values),
        coefficients,
        condition: solved.condition,
    })
}

/// Fills `psi_{skN}^(nu)`, `nu = k..n-1`, from the Kirchhoff sums. `known`
/// holds complete data for every edge other than `N`.
pub fn kirchhoff_complete(model: &GraphModel, known: &[PsiBoundaryData], partial: &PsiBoundaryData) -> PsiBoundaryData {
    let n = model.order();
    let (target, k) = (partial.j, partial.k);
    assert!(partial.known_prefix() >= k, "target data must hold nu = 0..k-1");
    assert_eq!(known.len(), model.edge_count() - 1, "need every edge except the target");
    let mut u: Vec<C64> = (0..k).map(|nu| eval_uform(model.gamma(target), &partial.values, nu)).collect();
    for nu in k..n {
        let sum: C64 = known
            .iter()
            .map(|d| {
                assert!(d.is_complete() && d.j != target);
                eval_uform(model.gamma(d.j), &d.values, nu)
            })
            .sum();
        u.push(-sum);
    }
    let mut out = partial.clone();
    out.values = invert_uchain(model.gamma(target), &u);
    out.filled = vec![true; n];
    out
}

/// Internal matrix with the diagnostics of its denominators.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledMatrix {
    pub matrix: InternalWeylMatrix,
    /// Worst condition estimate over the denominator matrices.
    pub condition: f64,
    /// Smallest ratio of a denominator to the product of the norms of the
    /// full `psi` vectors entering it.
    pub relative_denominator: f64,
}

/// `m_N` from `psi_{skN}`, `k = 1..n-1` (in order), via the ratios
/// `det[psi, .., psi^(k-2), psi^(nu-1)] / det[psi^(xi-1)]` over rows
/// `mu = 1..k`. The ratio is evaluated as the last Cramer component of
/// `A x = v` with `A[mu][xi] = psi_{s mu N}^(xi-1)`.
pub fn assemble_m_n(psi: &[PsiBoundaryData], lambda: C64) -> Result<AssembledMatrix> {
    let n = psi.len() + 1;
    let j = psi.first().map(|d| d.j).unwrap_or(0);
    for (i, d) in psi.iter().enumerate() {
        assert_eq!(d.k, i + 1, "psi data out of order");
        assert!(d.is_complete() && d.values.len() == n);
    }
    let mut m = CMatrix::identity(n, n);
    let mut condition = 1.0f64;
    let mut relative_denominator = f64::INFINITY;
    for k in 1..n {
        let a = CMatrix::from_fn(k, k, |mu, xi| psi[mu].values[xi]);
        let h = relative_determinant(&a, psi[..k].iter().map(|d| d.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()));
        relative_denominator = relative_denominator.min(h);
        if !(h >= DENOMINATOR_FLOOR) {
            return Err(Error::DenominatorSingular { k });
        }
        for nu in k + 1..=n {
            let v = CVector::from_fn(k, |mu, _| psi[mu].values[nu - 1]);
            let solved = solve(&a, &v, "denominator").map_err(|_| Error::DenominatorSingular { k })?;
            if !(solved.condition <= SINGULAR_CONDITION) {
                return Err(Error::DenominatorSingular { k });
            }
            condition = condition.max(solved.condition);
            m[(k - 1, nu - 1)] = solved.x[k - 1];
        }
    }
    for r in 0..n {
        assert_eq!(m[(r, r)], ONE);
        for c in 0..r {
            assert_eq!(m[(r, c)], ZERO);
        }
    }
    Ok(AssembledMatrix {
        matrix: InternalWeylMatrix { j, lambda, m },
        condition,
        relative_denominator,
    })
}

/// Sampled Weyl matrices `M_s` on a grid, as consumed by the reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct WeylSamples {
    pub s: usize,
    pub lambda: Vec<C64>,
    pub m: Vec<CMatrix>,
    pub near_pole: Vec<bool>,
}

impl WeylSamples {
    pub fn from_records(s: usize, records: &[WeylRecord]) -> Self {
        Self {
            s,
            lambda: records.iter().map(|r| r.lambda).collect(),
            m: records.iter().map(WeylRecord::matrix).collect(),
            near_pole: records.iter().map(WeylRecord::near_pole).collect(),
        }
    }

    /// Forward computation of `M_s` on a grid.
    pub fn compute(model: &GraphModel, s: usize, lambda: &[C64], settings: &IntegrationSettings) -> Result<Self> {
        let records = lambda
            .par_iter()
            .map(|&l| weyl_record(model, s, l, settings))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_records(s, &records))
    }
}

/// One grid point of a reconstruction: either a matrix or a flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedPoint {
    pub lambda: C64,
    pub m: Option<InternalWeylMatrix>,
    /// Reason the point was excluded.
    pub flag: Option<String>,
    /// Worst sigma condition estimate (NaN if not reached).
    pub sigma_condition: f64,
    /// Worst denominator condition estimate (NaN if not reached).
    pub denominator_condition: f64,
    /// Largest relative disagreement with other source vertices, if computed.
    pub spread: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionReport {
    pub target: usize,
    pub source: usize,
    pub points: Vec<ReconstructedPoint>,
}

impl ReconstructionReport {
    pub fn valued(&self) -> usize {
        self.points.iter().filter(|p| p.m.is_some()).count()
    }

    pub fn flagged(&self) -> usize {
        self.points.iter().filter(|p| p.flag.is_some()).count()
    }

    pub fn flagged_fraction(&self) -> f64 {
        if self.points.is_empty() {
            0.0
        } else {
            self.flagged() as f64 / self.points.len() as f64
        }
    }
}

/// Default source vertex: the smallest index other than the target.
pub fn default_source(p: usize, target: usize) -> usize {
    (1..=p).find(|&s| s != target).expect("a star has at least two edges")
}

/// Everything computed at one grid point.
#[derive(Debug, Clone)]
pub struct PointPipeline {
    /// Complete data for every edge except the target, per row `k`.
    pub known: Vec<Vec<PsiBoundaryData>>,
    /// Complete `psi_{skN}` for `k = 1..n-1`.
    pub target: Vec<PsiBoundaryData>,
    pub sigma_condition: f64,
}

/// Runs the stages up to the Kirchhoff completion. `bases[j-1]` must be
/// present for every `j != target` and is never read for the target.
pub fn psi_on_target(
    model: &GraphModel,
    target: usize,
    source: usize,
    m: &CMatrix,
    bases: &[Option<BasisValues>],
) -> Result<PointPipeline> {
    let n = model.order();
    let basis = |j: usize| bases[j - 1].as_ref().expect("basis for a known edge");
    let mut known_all = Vec::with_capacity(n - 1);
    let mut out = Vec::with_capacity(n - 1);
    let mut sigma_condition = 1.0f64;
    for k in 1..n {
        let on_source = step_edge_s(m, source, k, basis(source));
        let mut partial_target = None;
        let mut known = vec![on_source.clone()];
        for d in propagate_matching(model, &on_source) {
            if d.j == target {
                partial_target = Some(d);
            } else {
                let sol = solve_sigma(&d, basis(d.j))?;
                sigma_condition = sigma_condition.max(sol.condition);
                known.push(sol.psi);
            }
        }
        known.sort_by_key(|d| d.j);
        let partial = partial_target.expect("target differs from source");
        out.push(kirchhoff_complete(model, &known, &partial));
        known_all.push(known);
    }
    Ok(PointPipeline {
        known: known_all,
        target: out,
        sigma_condition,
    })
}

fn reconstruct_point(
    model: &GraphModel,
    target: usize,
    source: usize,
    lambda: C64,
    m: &CMatrix,
    near_pole: bool,
    settings: &IntegrationSettings,
) -> ReconstructedPoint {
    let mut point = ReconstructedPoint {
        lambda,
        m: None,
        flag: None,
        sigma_condition: f64::NAN,
        denominator_condition: f64::NAN,
        spread: None,
    };
    if near_pole {
        point.flag = Some("near_pole".into());
        return point;
    }
    let bases: Result<Vec<Option<BasisValues>>> = (1..=model.edge_count())
        .map(|j| {
            if j == target {
                Ok(None)
            } else {
                integrate_basis(model.edge(j), lambda, settings).map(Some)
            }
        })
        .collect();
    let outcome = bases.and_then(|bases| {
        let pipe = psi_on_target(model, target, source, m, &bases)?;
        Ok((pipe.sigma_condition, assemble_m_n(&pipe.target, lambda)))
    });
    match outcome {
        Ok((sigma, assembled)) => {
            point.sigma_condition = sigma;
            match assembled {
                Ok(a) => {
                    point.denominator_condition = a.condition;
                    point.m = Some(a.matrix);
                }
                Err(e) => point.flag = Some(e.kind().to_string()),
            }
        }
        Err(e) => point.flag = Some(e.kind().to_string()),
    }
    point
}

/// Reconstructs `m_target` on the common grid of `inputs`. `inputs` must
/// contain exactly one grid for every vertex other than the target, all on
/// the same points. The potential on the target edge is removed from `model`
/// before anything is computed.
pub fn reconstruct_m_n(
    model: &GraphModel,
    target: usize,
    inputs: &[WeylSamples],
    source: Option<usize>,
    settings: &IntegrationSettings,
) -> Result<ReconstructionReport> {
    let p = model.edge_count();
    let n = model.order();
    if !(1..=p).contains(&target) {
        return Err(Error::InvalidModel(format!("target edge {target} outside 1..={p}")));
    }
    let source = source.unwrap_or_else(|| default_source(p, target));
    if source == target || !(1..=p).contains(&source) {
        return Err(Error::InvalidModel(format!("source vertex {source} must differ from {target} and lie in 1..={p}")));
    }
    for s in (1..=p).filter(|&s| s != target) {
        if inputs.iter().filter(|g| g.s == s).count() != 1 {
            return Err(Error::InvalidModel(format!("expected exactly one Weyl grid for vertex {s}")));
        }
    }
    if let Some(g) = inputs.iter().find(|g| g.s == target || g.s == 0 || g.s > p) {
        return Err(Error::InvalidModel(format!("unexpected Weyl grid for vertex {}", g.s)));
    }
    let reference = inputs.iter().find(|g| g.s == source).expect("checked above");
    for g in inputs {
        if g.lambda != reference.lambda || g.m.len() != g.lambda.len() || g.near_pole.len() != g.lambda.len() {
            return Err(Error::GridMismatch { s: g.s });
        }
        if g.m.iter().any(|m| m.nrows() != n || m.ncols() != n) {
            return Err(Error::GridMismatch { s: g.s });
        }
    }
    let blind = model.without_potential(target);
    let points = (0..reference.lambda.len())
        .into_par_iter()
        .map(|i| {
            reconstruct_point(
                &blind,
                target,
                source,
                reference.lambda[i],
                &reference.m[i],
                reference.near_pole[i],
                settings,
            )
        })
        .collect();
    Ok(ReconstructionReport { target, source, points })
}

/// Largest relative difference over the strictly upper entries.
pub fn relative_difference(a: &CMatrix, b: &CMatrix) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for r in 0..n {
        for c in r + 1..n {
            let d = (a[(r, c)] - b[(r, c)]).norm();
            let scale = b[(r, c)].norm();
            worst = worst.max(if scale > 0.0 { d / scale } else { d });
        }
    }
    worst
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    /// Largest relative difference to the direct computation over valued points.
    pub max_discrepancy: f64,
    /// Largest relative disagreement between sources over points valued by all.
    pub source_spread: f64,
    pub reports: Vec<ReconstructionReport>,
    pub direct: Vec<InternalWeylMatrix>,
}

impl CrossValidation {
    /// Fraction of points valued by the first report and within `tol` of the
    /// direct computation.
    pub fn pass_fraction(&self, tol: f64) -> f64 {
        let report = &self.reports[0];
        let good = report
            .points
            .iter()
            .zip(&self.direct)
            .filter(|(p, d)| p.m.as_ref().is_some_and(|m| relative_difference(&m.m, &d.m) <= tol))
            .count();
        good as f64 / report.points.len().max(1) as f64
    }
}

/// Forward-computes `M_s`, `s != target`, with the full model, reconstructs
/// `m_target` from every source in `sources` (default source if empty), and
/// compares with the direct computation on the target edge.
pub fn cross_validate(
    model: &GraphModel,
    target: usize,
    sources: &[usize],
    lambda: &[C64],
    settings: &IntegrationSettings,
) -> Result<CrossValidation> {
    let p = model.edge_count();
    let inputs = (1..=p)
        .filter(|&s| s != target)
        .map(|s| WeylSamples::compute(model, s, lambda, settings))
        .collect::<Result<Vec<_>>>()?;
    let sources: Vec<usize> = if sources.is_empty() {
        vec![default_source(p, target)]
    } else {
        sources.to_vec()
    };
    let mut reports = sources
        .iter()
        .map(|&s| reconstruct_m_n(model, target, &inputs, Some(s), settings))
        .collect::<Result<Vec<_>>>()?;
    let direct = lambda
        .par_iter()
        .map(|&l| direct_internal_weyl(model, target, l, settings))
        .collect::<Result<Vec<_>>>()?;
    let mut max_discrepancy = 0.0f64;
    let mut source_spread = 0.0f64;
    for i in 0..lambda.len() {
        let valued: Vec<&CMatrix> = reports.iter().filter_map(|r| r.points[i].m.as_ref().map(|m| &m.m)).collect();
        if let Some(m) = reports[0].points[i].m.as_ref() {
            max_discrepancy = max_discrepancy.max(relative_difference(&m.m, &direct[i].m));
        }
        if reports.len() > 1 && valued.len() == reports.len() {
            let spread = valued[1..]
                .iter()
                .map(|other| relative_difference(other, valued[0]))
                .fold(0.0, f64::max);
            source_spread = source_spread.max(spread);
            reports[0].points[i].spread = Some(spread);
        }
    }
    Ok(CrossValidation {
        max_discrepancy,
        source_spread,
        reports,
        direct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EdgeModel, FormCoefficients};
    use crate::propagate::integrate_basis;
    use crate::stargraph::{vertex_basis, weyl_record_from};

    fn r(x: f64) -> C64 {
        C64::new(x, 0.0)
    }

    fn classical_star() -> GraphModel {
        GraphModel::with_identity_forms((1..=3).map(|j| EdgeModel::classical(j, 2, 1.0, 0.1)).collect()).unwrap()
    }

    fn settings() -> IntegrationSettings {
        IntegrationSettings {
            rtol: 1e-12,
            atol: 1e-14,
            ..IntegrationSettings::default()
        }
    }

    /// `M_{112}` for the classical star with `p = 3`, `l = 1`, `lambda = rho^2`.
    fn closed_m(rho: C64) -> C64 {
        let (s, c) = (rho.sinh(), rho.cosh());
        -(s * s + 2.0 * c * c) / (3.0 * s * c) * rho
    }

    fn closed_matrix(rho: C64) -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[ONE, closed_m(rho), ZERO, ONE])
    }

    #[test]
    fn source_edge_values() {
        let model = classical_star();
        let b = integrate_basis(model.edge(1), ONE, &settings()).unwrap();
        let m = closed_matrix(ONE);
        let d = step_edge_s(&m, 1, 1, &b);
        let mm = closed_m(ONE).re;
        assert!((d.values[0] - r(1f64.cosh() + mm * 1f64.sinh())).norm() < 1e-10);
        assert!((d.values[1] - r(1f64.sinh() + mm * 1f64.cosh())).norm() < 1e-10);
        assert!((d.values[0] - r(0.2160182)).norm() < 5e-7);
        assert!(d.is_complete());
        let zero = CMatrix::identity(2, 2);
        let d = step_edge_s(&zero, 1, 1, &b);
        assert_eq!(d.values, vec![b.get(1, 0), b.get(1, 1)]);
    }

    #[test]
    fn continuity_and_forms() {
        let model = classical_star();
        let src = PsiBoundaryData::full(1, 1, 1, ONE, vec![r(0.2160182), r(-0.5672788)]);
        let out = propagate_matching(&model, &src);
        assert_eq!(out.iter().map(|d| d.j).collect::<Vec<_>>(), vec![2, 3]);
        for d in &out {
            assert_eq!(d.values[0], r(0.2160182));
            assert_eq!(d.filled, vec![true, false]);
        }
        let mut g2 = FormCoefficients::identity(2);
        g2 = FormCoefficients::from_rows(vec![vec![r(2.0)], g2.rows()[1].clone()]).unwrap();
        let edges = (1..=3).map(|j| EdgeModel::classical(j, 2, 1.0, 0.1)).collect();
        let gammas = vec![FormCoefficients::identity(2), g2, FormCoefficients::identity(2)];
        let model = GraphModel::new(edges, gammas).unwrap();
        let out = propagate_matching(&model, &src);
        assert!((out[0].values[0] * 2.0 - src.values[0]).norm() < 1e-16);
        assert_eq!(out[1].values[0], src.values[0]);
    }

    #[test]
    fn sigma_classical() {
        let model = classical_star();
        let b = integrate_basis(model.edge(2), ONE, &settings()).unwrap();
        let psi0 = 1f64.cosh() + closed_m(ONE).re * 1f64.sinh();
        let mut partial = PsiBoundaryData::empty(1, 1, 2, ONE, 2);
        partial.values[0] = r(psi0);
        partial.filled[0] = true;
        let sol = solve_sigma(&partial, &b).unwrap();
        let coef = psi0 / 1f64.sinh();
        assert!((sol.coefficients[0] - r(coef)).norm() < 1e-10);
        assert!((sol.coefficients[0] - r(0.1838139)).norm() < 5e-7);
        assert!((sol.psi.values[1] - r(coef * 1f64.cosh())).norm() < 1e-10);
        // at lambda = 0 the basis is {1, x}
        let b0 = integrate_basis(model.edge(2), ZERO, &settings()).unwrap();
        partial.lambda = ZERO;
        let sol = solve_sigma(&partial, &b0).unwrap();
        assert!((sol.coefficients[0] - r(psi0)).norm() < 1e-10);
        partial.values[0] = ZERO;
        let sol = solve_sigma(&partial, &b0).unwrap();
        assert!(sol.psi.values.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn sigma_flags_singular_system() {
        let model = classical_star();
        let lambda = r(-std::f64::consts::PI.powi(2));
        let b = integrate_basis(model.edge(2), lambda, &settings()).unwrap();
        let mut partial = PsiBoundaryData::empty(1, 1, 2, lambda, 2);
        partial.values[0] = ONE;
        partial.filled[0] = true;
        assert!(matches!(solve_sigma(&partial, &b), Err(Error::SigmaSingular { edge: 2 })));
    }

    #[test]
    fn classical_pipeline_stage_values() {
        let model = classical_star();
        let bases: Vec<Option<BasisValues>> = vertex_basis(&model, ONE, &settings())
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, b)| if i == 2 { None } else { Some(b) })
            .collect();
        let pipe = psi_on_target(&model, 3, 1, &closed_matrix(ONE), &bases).unwrap();
        let t = &pipe.target[0];
        let coth = 1f64.cosh() / 1f64.sinh();
        assert!((t.values[1] / t.values[0] - r(coth)).norm() < 1e-10);
        assert!((t.values[1] - r(0.2836826)).norm() < 1e-4);
        // Kirchhoff sum is imposed exactly
        let sum: C64 = pipe.known[0].iter().map(|d| d.values[1]).sum::<C64>() + t.values[1];
        assert!(sum.norm() < 1e-12);
    }

    #[test]
    fn kirchhoff_symmetric_and_cubic_structure() {
        let model = classical_star();
        let known = vec![
            PsiBoundaryData::full(1, 1, 1, ONE, vec![ONE, r(-2.0)]),
            PsiBoundaryData::full(1, 1, 2, ONE, vec![ONE, r(1.0)]),
        ];
        let mut partial = PsiBoundaryData::empty(1, 1, 3, ONE, 2);
        partial.values[0] = ONE;
        partial.filled[0] = true;
        let out = kirchhoff_complete(&model, &known, &partial);
        assert_eq!(out.values, vec![ONE, r(1.0)]);

        let edges = (1..=2)
            .map(|j| EdgeModel::new(j, 3, 1.0, 0.1, vec![r(3.0), r(-3.0)], Vec::new()).unwrap())
            .collect();
        let model = GraphModel::with_identity_forms(edges).unwrap();
        let known = vec![PsiBoundaryData::full(1, 1, 1, ONE, vec![ONE, r(2.0), r(3.0)])];
        let mut partial = PsiBoundaryData::empty(1, 1, 2, ONE, 3);
        partial.values[0] = ONE;
        partial.filled[0] = true;
        let out = kirchhoff_complete(&model, &known, &partial);
        assert_eq!(out.values, vec![ONE, r(-2.0), r(-3.0)]);
        assert!(out.is_complete());
    }

    #[test]
    fn assemble_reduces_to_ratio_for_first_row() {
        let d1 = PsiBoundaryData::full(1, 1, 3, ONE, vec![r(2.0), r(3.0), r(5.0)]);
        let d2 = PsiBoundaryData::full(1, 2, 3, ONE, vec![r(1.0), r(7.0), r(11.0)]);
        let a = assemble_m_n(&[d1, d2], ONE).unwrap().matrix;
        assert!((a.entry(1, 2) - r(1.5)).norm() < 1e-15);
        assert!((a.entry(1, 3) - r(2.5)).norm() < 1e-15);
        // det[[2, 5], [1, 11]] / det[[2, 3], [1, 7]] = 17 / 11
        assert!((a.entry(2, 3) - r(17.0 / 11.0)).norm() < 1e-14);
        assert_eq!(a.entry(2, 1), ZERO);
        assert_eq!(a.entry(3, 3), ONE);
    }

    #[test]
    fn assemble_rejects_vanishing_denominator() {
        let d = PsiBoundaryData::full(1, 1, 3, ONE, vec![ZERO, ONE]);
        assert!(matches!(assemble_m_n(&[d], ONE), Err(Error::DenominatorSingular { k: 1 })));
    }

    #[test]
    fn classical_grid_matches_closed_form_for_both_sources() {
        let model = classical_star();
        let grid = [r(0.5), r(1.0), r(1.5)];
        let inputs: Vec<WeylSamples> = (1..=2)
            .map(|s| WeylSamples::compute(&model, s, &grid, &settings()).unwrap())
            .collect();
        let a = reconstruct_m_n(&model, 3, &inputs, None, &settings()).unwrap();
        let b = reconstruct_m_n(&model, 3, &inputs, Some(2), &settings()).unwrap();
        assert_eq!(a.source, 1);
        for (i, l) in grid.iter().enumerate() {
            let rho = l.sqrt();
            let want = rho * rho.cosh() / rho.sinh();
            let ma = a.points[i].m.as_ref().unwrap().entry(1, 2);
            let mb = b.points[i].m.as_ref().unwrap().entry(1, 2);
            assert!((ma - want).norm() < 1e-8 * want.norm());
            assert!((mb - ma).norm() < 1e-8 * want.norm());
        }
        let weird = r(1.0 + 1e-3);
        let mut shifted = inputs.clone();
        shifted[1].lambda[0] = weird;
        assert!(matches!(
            reconstruct_m_n(&model, 3, &shifted, None, &settings()),
            Err(Error::GridMismatch { s: 2 })
        ));
    }

    #[test]
    fn eigenvalue_on_grid_is_flagged_only_there() {
        let model = classical_star();
        let star = -std::f64::consts::PI.powi(2) / 4.0;
        let grid = [r(0.5), r(star), r(1.5)];
        let inputs: Vec<WeylSamples> = (1..=2)
            .map(|s| WeylSamples::compute(&model, s, &grid, &settings()).unwrap())
            .collect();
        let rep = reconstruct_m_n(&model, 3, &inputs, None, &settings()).unwrap();
        assert!(rep.points[1].flag.is_some() && rep.points[1].m.is_none());
        for i in [0, 2] {
            assert!(rep.points[i].flag.is_none() && rep.points[i].m.is_some());
        }
        for p in &rep.points {
            assert!(p.m.is_some() != p.flag.is_some());
        }
    }

    #[test]
    fn reconstruction_never_sees_target_potential() {
        let model = classical_star();
        let q = crate::model::CollaredPolynomial::new(0.4, vec![r(3.0), r(-1.0)]);
        let mut edges: Vec<EdgeModel> = model.edges().iter().map(|e| e.model.clone()).collect();
        edges[2].potentials = vec![q];
        let loaded = GraphModel::with_identity_forms(edges).unwrap();
        let grid = [C64::new(2.0, 1.0)];
        let inputs: Vec<WeylSamples> = (1..=2)
            .map(|s| WeylSamples::compute(&loaded, s, &grid, &settings()).unwrap())
            .collect();
        let a = reconstruct_m_n(&loaded, 3, &inputs, None, &settings()).unwrap();
        let b = reconstruct_m_n(&loaded.without_potential(3), 3, &inputs, None, &settings()).unwrap();
        assert_eq!(a, b);
        let direct = direct_internal_weyl(&loaded, 3, grid[0], &settings()).unwrap();
        let got = a.points[0].m.as_ref().unwrap();
        assert!(relative_difference(&got.m, &direct.m) < 1e-8);
    }

    #[test]
    fn cross_validation_classical() {
        let model = classical_star();
        let grid: Vec<C64> = (0..6).map(|i| C64::new(-3.0 + 1.7 * i as f64, 2.0 - 0.5 * i as f64)).collect();
        let cv = cross_validate(&model, 3, &[1, 2], &grid, &settings()).unwrap();
        assert!(cv.max_discrepancy <= 1e-8, "{}", cv.max_discrepancy);
        assert!(cv.source_spread <= 1e-8, "{}", cv.source_spread);
        assert_eq!(cv.pass_fraction(1e-8), 1.0);
        for (p, l) in cv.reports[0].points.iter().zip(&grid) {
            let rho = l.sqrt();
            let want = rho * rho.cosh() / rho.sinh();
            assert!((p.m.as_ref().unwrap().entry(1, 2) - want).norm() <= 1e-8 * want.norm());
        }
    }

    #[test]
    fn forward_records_feed_the_pipeline() {
        let model = classical_star();
        let bases = vertex_basis(&model, C64::new(0.3, 0.7), &settings()).unwrap();
        let rec = weyl_record_from(&model, &bases, 2, C64::new(0.3, 0.7)).unwrap();
        let s = WeylSamples::from_records(2, &[rec.clone()]);
        assert_eq!(s.m[0], rec.matrix());
        assert_eq!(s.near_pole, vec![false]);
    }
}
