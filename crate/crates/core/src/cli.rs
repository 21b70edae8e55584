//! Run configuration, grid handling and the command implementations behind
//! the `singstar` binary.
//!
//! Output is CSV: one `#` manifest line, a header, then one row per grid
//! point in grid order. Floats use `{:.16e}`.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{condition, CMatrix, C64};
use crate::model::{CollaredPolynomial, EdgeModel, FormCoefficients, GraphModel};
use crate::propagate::{integrate_basis, IntegrationSettings};
use crate::reconstruct::{cross_validate, default_source, reconstruct_m_n, relative_difference, WeylSamples};
use crate::stargraph::{
    asymptotic_check, eigen_scan, internal_weyl_from_basis, vertex_basis, weyl_record_from, ScanOptions,
};

/// Largest admissible `|lambda|^(1/n) x0`.
pub const COLLAR_GUARD: f64 = 4.0;
/// Largest admissible `|lambda|^(1/n) (l - x0)`.
pub const STIFFNESS_GUARD: f64 = 60.0;

/// A complex number written either as a bare real or as `[re, im]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComplexValue {
    Real(f64),
    Pair([f64; 2]),
}

impl From<ComplexValue> for C64 {
    fn from(v: ComplexValue) -> Self {
        match v {
            ComplexValue::Real(x) => C64::new(x, 0.0),
            ComplexValue::Pair([re, im]) => C64::new(re, im),
        }
    }
}

impl From<C64> for ComplexValue {
    fn from(z: C64) -> Self {
        if z.im == 0.0 {
            ComplexValue::Real(z.re)
        } else {
            ComplexValue::Pair([z.re, z.im])
        }
    }
}

fn complex_vec(v: &[ComplexValue]) -> Vec<C64> {
    v.iter().map(|&z| z.into()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    pub start: f64,
    pub coeffs: Vec<ComplexValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeConfig {
    pub length: f64,
    pub collar: f64,
    pub nu: Vec<ComplexValue>,
    /// `q_0 .. q_{n-2}`; missing components are zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub potentials: Vec<Option<PotentialConfig>>,
}

/// Grid of spectral parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GridSpec {
    List {
        points: Vec<ComplexValue>,
    },
    /// `count` equally spaced points on the segment from `start` to `end`.
    Linspace {
        start: ComplexValue,
        end: ComplexValue,
        count: usize,
    },
    /// Row-major rectangle: `im` varies slowest.
    Rect {
        re: [f64; 2],
        im: [f64; 2],
        nre: usize,
        nim: usize,
    },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::List { points: Vec::new() }
    }
}

fn spaced(a: f64, b: f64, count: usize, i: usize) -> f64 {
    if count == 1 {
        a
    } else {
        a + (b - a) * i as f64 / (count - 1) as f64
    }
}

impl GridSpec {
    pub fn points(&self) -> Vec<C64> {
        match self {
            GridSpec::List { points } => complex_vec(points),
            GridSpec::Linspace { start, end, count } => {
                let (a, b): (C64, C64) = ((*start).into(), (*end).into());
                (0..*count)
                    .map(|i| C64::new(spaced(a.re, b.re, *count, i), spaced(a.im, b.im, *count, i)))
                    .collect()
            }
            GridSpec::Rect { re, im, nre, nim } => (0..*nim)
                .flat_map(|r| (0..*nre).map(move |c| C64::new(spaced(re[0], re[1], *nre, c), spaced(im[0], im[1], *nim, r))))
                .collect(),
        }
    }
}

fn default_one() -> usize {
    1
}

fn default_arg() -> f64 {
    0.3
}

fn default_tolerance() -> f64 {
    1e-6
}

fn default_interval() -> [f64; 2] {
    [-12.0, -0.5]
}

fn default_moduli() -> Vec<f64> {
    vec![10.0, 20.0, 40.0]
}

/// Command parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    /// Boundary vertex for `weyl`, `eigs` and `asym`.
    #[serde(default = "default_one")]
    pub s: usize,
    /// Row of `M_s` for `eigs` and `asym`.
    #[serde(default = "default_one")]
    pub k: usize,
    /// Edge for `internal`, `reconstruct` and `roundtrip`; defaults to `p`.
    #[serde(default)]
    pub target: Option<usize>,
    /// Source vertices for reconstruction; the first is the primary one.
    #[serde(default)]
    pub sources: Vec<usize>,
    /// Weyl grid files (as written by `weyl`) for `reconstruct`, one per
    /// vertex other than the target. When empty the grids are computed.
    #[serde(default)]
    pub weyl_inputs: Vec<PathBuf>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_interval")]
    pub interval: [f64; 2],
    #[serde(default)]
    pub scan_points: Option<usize>,
    #[serde(default = "default_arg")]
    pub arg: f64,
    #[serde(default = "default_moduli")]
    pub moduli: Vec<f64>,
    /// Probe point for `asym`; defaults to the middle of `(x0, l)`.
    #[serde(default)]
    pub x: Option<f64>,
    #[serde(default)]
    pub rtol: Option<f64>,
    #[serde(default)]
    pub atol: Option<f64>,
}

impl Default for Params {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all parameters have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub order: usize,
    pub edges: Vec<EdgeConfig>,
    /// `gamma[j][nu][mu]`, `mu <= nu`; identity forms when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<Vec<Vec<ComplexValue>>>>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub params: Params,
}

/// A configuration whose model and grid passed validation.
#[derive(Debug, Clone)]
pub struct ValidatedConfig {
    pub config: RunConfig,
    pub model: GraphModel,
    pub grid: Vec<C64>,
}

impl ValidatedConfig {
    pub fn settings(&self) -> IntegrationSettings {
        let mut s = IntegrationSettings::default();
        if let Some(r) = self.config.params.rtol {
            s.rtol = r;
        }
        if let Some(a) = self.config.params.atol {
            s.atol = a;
        }
        s
    }

    pub fn target(&self) -> usize {
        self.config.params.target.unwrap_or(self.model.edge_count())
    }

    pub fn sources(&self) -> Vec<usize> {
        if self.config.params.sources.is_empty() {
            vec![default_source(self.model.edge_count(), self.target())]
        } else {
            self.config.params.sources.clone()
        }
    }
}

fn build_model(cfg: &RunConfig) -> Result<GraphModel> {
    let n = cfg.order;
    if n < 2 {
        return Err(Error::Schema(format!("order must be at least 2, got {n}")));
    }
    let edges = cfg
        .edges
        .iter()
        .enumerate()
        .map(|(pos, e)| {
            let j = pos + 1;
            if e.potentials.len() > n - 1 {
                return Err(Error::Schema(format!("edge {j}: at most {} potential components", n - 1)));
            }
            let mut potentials = vec![CollaredPolynomial::zero(); n - 1];
            for (mu, q) in e.potentials.iter().enumerate() {
                if let Some(q) = q {
                    potentials[mu] = CollaredPolynomial::new(q.start, complex_vec(&q.coeffs));
                }
            }
            EdgeModel::new(j, n, e.length, e.collar, complex_vec(&e.nu), potentials)
        })
        .collect::<Result<Vec<_>>>()?;
    let gamma = match &cfg.gamma {
        None => vec![FormCoefficients::identity(n); edges.len()],
        Some(g) => g
            .iter()
            .enumerate()
            .map(|(pos, rows)| {
                FormCoefficients::from_rows(rows.iter().map(|r| complex_vec(r)).collect())
                    .map_err(|e| Error::Schema(format!("gamma for edge {}: {e}", pos + 1)))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    GraphModel::new(edges, gamma)
}

/// Rejects `lambda` if it violates the collar or stiffness guard on any edge.
pub fn check_guards(model: &GraphModel, lambda: C64) -> Result<()> {
    let r = lambda.norm().powf(1.0 / model.order() as f64);
    let slack = 1.0 + 1e-12;
    for e in model.edges() {
        let x0 = e.collar();
        if r * x0 > COLLAR_GUARD * slack {
            return Err(Error::GuardViolation(format!(
                "lambda = {lambda}: |lambda|^(1/n) x0 = {} exceeds {COLLAR_GUARD} on edge {}",
                r * x0,
                e.index()
            )));
        }
        if r * (e.length() - x0) > STIFFNESS_GUARD * slack {
            return Err(Error::GuardViolation(format!(
                "lambda = {lambda}: |lambda|^(1/n) (l - x0) = {} exceeds {STIFFNESS_GUARD} on edge {}",
                r * (e.length() - x0),
                e.index()
            )));
        }
    }
    Ok(())
}

fn check_vertex(model: &GraphModel, name: &str, j: usize) -> Result<()> {
    let p = model.edge_count();
    if (1..=p).contains(&j) {
        Ok(())
    } else {
        Err(Error::Schema(format!("{name} = {j} outside 1..={p}")))
    }
}

fn validate_params(model: &GraphModel, params: &Params) -> Result<()> {
    let n = model.order();
    check_vertex(model, "s", params.s)?;
    if !(1..n).contains(&params.k) {
        return Err(Error::Schema(format!("k = {} outside 1..={}", params.k, n - 1)));
    }
    let target = params.target.unwrap_or(model.edge_count());
    check_vertex(model, "target", target)?;
    for &s in &params.sources {
        check_vertex(model, "source", s)?;
        if s == target {
            return Err(Error::Schema(format!("source {s} coincides with the target edge")));
        }
    }
    let [a, b] = params.interval;
    if !(a < b) {
        return Err(Error::Schema(format!("interval [{a}, {b}] is empty")));
    }
    if params.moduli.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::Schema("moduli must be positive".into()));
    }
    if let Some(x) = params.x {
        let e = model.edge(params.s);
        if !(x > e.collar() && x < e.length()) {
            return Err(Error::Schema(format!("probe x = {x} outside ({}, {})", e.collar(), e.length())));
        }
    }
    if !(params.tolerance > 0.0) {
        return Err(Error::Schema("tolerance must be positive".into()));
    }
    Ok(())
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ValidatedConfig> {
    let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let model = build_model(&config)?;
    let grid = config.grid.points();
    for &l in &grid {
        if !l.is_finite() {
            return Err(Error::Schema(format!("non-finite grid point {l}")));
        }
        check_guards(&model, l)?;
    }
    validate_params(&model, &config.params)?;
    Ok(ValidatedConfig { config, model, grid })
}

/// Writes a validated configuration back out, built from the model itself.
pub fn serialize_config(v: &ValidatedConfig) -> String {
    let model = &v.model;
    let edges = model
        .edges()
        .iter()
        .map(|e| {
            let m = &e.model;
            let potentials = if m.potentials.iter().all(CollaredPolynomial::is_zero) {
                Vec::new()
            } else {
                m.potentials
                    .iter()
                    .map(|q| {
                        (!q.is_zero()).then(|| PotentialConfig {
                            start: q.start,
                            coeffs: q.coeffs.iter().map(|&z| z.into()).collect(),
                        })
                    })
                    .collect()
            };
            EdgeConfig {
                length: m.length,
                collar: m.collar,
                nu: m.nu.iter().map(|&z| z.into()).collect(),
                potentials,
            }
        })
        .collect();
    let gamma = model
        .gammas()
        .iter()
        .map(|g| g.rows().iter().map(|r| r.iter().map(|&z| z.into()).collect()).collect())
        .collect();
    let cfg = RunConfig {
        order: model.order(),
        edges,
        gamma: Some(gamma),
        grid: GridSpec::List {
            points: v.grid.iter().map(|&z| z.into()).collect(),
        },
        params: v.config.params.clone(),
    };
    serde_json::to_string_pretty(&cfg).expect("configuration serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Check the configuration only.
    Validate,
    /// Fundamental system at the internal vertex on every edge.
    Basis,
    /// Weyl matrix `M_s` and characteristic functions.
    Weyl,
    /// Internal Weyl matrix of the target edge, computed directly.
    Internal,
    /// Eigenvalues of the `(s, k)` problem on a real interval.
    Eigs,
    /// Deviation of the Weyl solution from its leading asymptotics.
    Asym,
    /// Internal Weyl matrix of the target edge from the other edges' data.
    Reconstruct,
    /// Reconstruction compared with the direct computation.
    Roundtrip,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Basis => "basis",
            Command::Weyl => "weyl",
            Command::Internal => "internal",
            Command::Eigs => "eigs",
            Command::Asym => "asym",
            Command::Reconstruct => "reconstruct",
            Command::Roundtrip => "roundtrip",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "singstar", version, about = "Weyl-type matrices on star graphs with singular edges")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Configuration file (JSON).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Output CSV path; standard output when absent.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
}

/// Result of a command: CSV text and whether it met its tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub csv: String,
    pub passed: bool,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Schema(_)
        | Error::InvalidModel(_)
        | Error::GuardViolation(_)
        | Error::AdmissibilityViolation { .. }
        | Error::GridMismatch { .. } => EXIT_VALIDATION,
        _ => EXIT_NUMERICAL,
    }
}

/// Machine-readable error record.
pub fn error_record(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn push_complex(row: &mut Vec<String>, z: C64) {
    row.push(num(z.re));
    row.push(num(z.im));
}

fn push_complex_header(head: &mut Vec<String>, name: &str) {
    head.push(format!("{name}_re"));
    head.push(format!("{name}_im"));
}

fn manifest(cmd: Command, v: &ValidatedConfig, extra: &str) -> String {
    format!(
        "# singstar {} order={} edges={} points={}{}",
        cmd.name(),
        v.model.order(),
        v.model.edge_count(),
        v.grid.len(),
        extra
    )
}

fn render(manifest: String, head: Vec<String>, rows: Vec<Vec<String>>, trailer: Option<String>) -> String {
    let mut out = String::new();
    out.push_str(&manifest);
    out.push('\n');
    out.push_str(&head.join(","));
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    if let Some(t) = trailer {
        out.push_str(&t);
        out.push('\n');
    }
    out
}

fn lambda_header() -> Vec<String> {
    vec!["lambda_re".into(), "lambda_im".into()]
}

fn lambda_row(l: C64) -> Vec<String> {
    vec![num(l.re), num(l.im)]
}

fn run_basis(v: &ValidatedConfig) -> Result<CommandOutput> {
    let (n, p) = (v.model.order(), v.model.edge_count());
    let settings = v.settings();
    let mut head = lambda_header();
    for j in 1..=p {
        for k in 1..=n {
            for nu in 0..n {
                push_complex_header(&mut head, &format!("S_j{j}_k{k}_nu{nu}"));
            }
        }
    }
    for j in 1..=p {
        head.push(format!("drift_j{j}"));
    }
    head.extend(["flag".into(), "condition".into()]);
    let rows = v
        .grid
        .par_iter()
        .map(|&l| {
            let bases = vertex_basis(&v.model, l, &settings)?;
            let mut row = lambda_row(l);
            for b in &bases {
                for k in 1..=n {
                    for nu in 0..n {
                        push_complex(&mut row, b.get(k, nu));
                    }
                }
            }
            row.extend(bases.iter().map(|b| num(b.wronskian_drift)));
            let cond = bases.iter().map(|b| condition(&b.w)).fold(1.0, f64::max);
            row.extend(["0".into(), num(cond)]);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CommandOutput {
        csv: render(manifest(Command::Basis, v, ""), head, rows, None),
        passed: true,
    })
}

/// Column name of `M_{sk mu}` in a Weyl grid file.
fn weyl_column(s: usize, k: usize, mu: usize) -> String {
    format!("M_s{s}_k{k}_mu{mu}")
}

fn run_weyl(v: &ValidatedConfig) -> Result<CommandOutput> {
    let (n, p) = (v.model.order(), v.model.edge_count());
    let s = v.config.params.s;
    let settings = v.settings();
    let mut head = lambda_header();
    for k in 1..n {
        for mu in k + 1..=n {
            push_complex_header(&mut head, &weyl_column(s, k, mu));
        }
    }
    for k in 1..n {
        for j in (1..=p).filter(|&j| j != s) {
            for mu in n - k + 1..=n {
                push_complex_header(&mut head, &format!("M_s{s}_k{k}_j{j}_mu{mu}"));
            }
        }
    }
    for k in 1..n {
        push_complex_header(&mut head, &format!("Delta_s{s}_k{k}"));
    }
    head.extend(["flag".into(), "condition".into()]);
    let rows = v
        .grid
        .par_iter()
        .map(|&l| {
            let bases = vertex_basis(&v.model, l, &settings)?;
            let rec = weyl_record_from(&v.model, &bases, s, l)?;
            let mut row = lambda_row(l);
            for r in &rec.rows {
                for mu in r.k + 1..=n {
                    push_complex(&mut row, r.m(mu));
                }
            }
            for r in &rec.rows {
                for j in (1..=p).filter(|&j| j != s) {
                    for &z in &r.off[j - 1] {
                        push_complex(&mut row, z);
                    }
                }
            }
            for r in &rec.rows {
                push_complex(&mut row, r.delta);
            }
            let cond = rec.rows.iter().map(|r| r.condition).fold(1.0, f64::max);
            row.push(if rec.near_pole() { "1".into() } else { "0".into() });
            row.push(num(cond));
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CommandOutput {
        csv: render(manifest(Command::Weyl, v, &format!(" s={s}")), head, rows, None),
        passed: true,
    })
}

/// Reads a grid file written by `weyl` back into samples of `M_s`.
pub fn read_weyl_csv(text: &str, order: usize) -> Result<WeylSamples> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let manifest = lines.next().ok_or_else(|| Error::Schema("empty Weyl grid file".into()))?;
    if !manifest.starts_with("# singstar weyl") {
        return Err(Error::Schema("not a Weyl grid file".into()));
    }
    let s: usize = manifest
        .split_whitespace()
        .find_map(|t| t.strip_prefix("s="))
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Schema("Weyl grid manifest lacks s=".into()))?;
    let head: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Schema("Weyl grid file lacks a header".into()))?
        .split(',')
        .collect();
    let col = |name: &str| {
        head.iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Schema(format!("Weyl grid file lacks column {name}")))
    };
    let (lre, lim, flag) = (col("lambda_re")?, col("lambda_im")?, col("flag")?);
    let mut entries = Vec::new();
    for k in 1..order {
        for mu in k + 1..=order {
            let name = weyl_column(s, k, mu);
            entries.push((k, mu, col(&format!("{name}_re"))?, col(&format!("{name}_im"))?));
        }
    }
    let mut out = WeylSamples {
        s,
        lambda: Vec::new(),
        m: Vec::new(),
        near_pole: Vec::new(),
    };
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != head.len() {
            return Err(Error::Schema(format!("row has {} cells, header has {}", cells.len(), head.len())));
        }
        let f = |i: usize| {
            cells[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Schema(format!("bad number {:?}: {e}", cells[i])))
        };
        out.lambda.push(C64::new(f(lre)?, f(lim)?));
        let mut m = CMatrix::identity(order, order);
        for &(k, mu, re, im) in &entries {
            m[(k - 1, mu - 1)] = C64::new(f(re)?, f(im)?);
        }
        out.m.push(m);
        out.near_pole.push(cells[flag].trim() != "0");
    }
    Ok(out)
}

fn internal_header(head: &mut Vec<String>, j: usize, n: usize) {
    for k in 1..n {
        for nu in k + 1..=n {
            push_complex_header(head, &format!("m_j{j}_k{k}_nu{nu}"));
        }
    }
}

fn push_internal(row: &mut Vec<String>, m: Option<&CMatrix>, n: usize) {
    for k in 1..n {
        for nu in k + 1..=n {
            match m {
                Some(m) => push_complex(row, m[(k - 1, nu - 1)]),
                None => row.extend(["nan".to_string(), "nan".to_string()]),
            }
        }
    }
}

fn run_internal(v: &ValidatedConfig) -> Result<CommandOutput> {
    let n = v.model.order();
    let j = v.target();
    let settings = v.settings();
    let mut head = lambda_header();
    internal_header(&mut head, j, n);
    head.extend(["flag".into(), "condition".into()]);
    let rows = v
        .grid
        .par_iter()
        .map(|&l| {
            let b = integrate_basis(v.model.edge(j), l, &settings)?;
            let (m, cond) = internal_weyl_from_basis(&b)?;
            let mut row = lambda_row(l);
            push_internal(&mut row, Some(&m.m), n);
            row.extend(["0".into(), num(cond)]);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CommandOutput {
        csv: render(manifest(Command::Internal, v, &format!(" j={j}")), head, rows, None),
        passed: true,
    })
}

fn run_eigs(v: &ValidatedConfig) -> Result<CommandOutput> {
    let p = &v.config.params;
    for end in p.interval {
        check_guards(&v.model, C64::new(end, 0.0))?;
    }
    let mut opts = ScanOptions::default();
    if let Some(g) = p.scan_points {
        opts.grid = g.max(3);
    }
    let (accepted, _) = eigen_scan(&v.model, p.s, p.k, (p.interval[0], p.interval[1]), &opts, &v.settings())?;
    let head = ["index", "lambda_re", "lambda_im", "residual", "iterations"].map(String::from).to_vec();
    let rows = accepted
        .iter()
        .enumerate()
        .map(|(i, c)| {
            vec![
                (i + 1).to_string(),
                num(c.lambda.re),
                num(c.lambda.im),
                num(c.residual),
                c.iterations.to_string(),
            ]
        })
        .collect();
    let extra = format!(" s={} k={} interval=[{},{}]", p.s, p.k, num(p.interval[0]), num(p.interval[1]));
    Ok(CommandOutput {
        csv: render(manifest(Command::Eigs, v, &extra), head, rows, None),
        passed: true,
    })
}

fn run_asym(v: &ValidatedConfig) -> Result<CommandOutput> {
    let p = &v.config.params;
    let n = v.model.order() as i32;
    for &m in &p.moduli {
        check_guards(&v.model, C64::new(m.powi(n), 0.0))?;
    }
    let e = v.model.edge(p.s);
    let x = p.x.unwrap_or(0.5 * (e.collar() + e.length()));
    let dev = asymptotic_check(&v.model, p.s, p.k, p.arg, &p.moduli, x, &v.settings())?;
    let head = ["modulus", "rho_re", "rho_im", "deviation"].map(String::from).to_vec();
    let rows = p
        .moduli
        .iter()
        .zip(&dev)
        .map(|(&m, &d)| {
            let rho = C64::from_polar(m, p.arg);
            vec![num(m), num(rho.re), num(rho.im), num(d)]
        })
        .collect();
    let extra = format!(" s={} k={} arg={} x={}", p.s, p.k, num(p.arg), num(x));
    Ok(CommandOutput {
        csv: render(manifest(Command::Asym, v, &extra), head, rows, None),
        passed: true,
    })
}

fn weyl_inputs(v: &ValidatedConfig) -> Result<Vec<WeylSamples>> {
    let p = v.model.edge_count();
    let target = v.target();
    if v.config.params.weyl_inputs.is_empty() {
        return (1..=p)
            .filter(|&s| s != target)
            .map(|s| WeylSamples::compute(&v.model, s, &v.grid, &v.settings()))
            .collect();
    }
    v.config
        .params
        .weyl_inputs
        .iter()
        .map(|path| read_weyl_csv(&std::fs::read_to_string(path)?, v.model.order()))
        .collect()
}

fn run_reconstruct(v: &ValidatedConfig) -> Result<CommandOutput> {
    let n = v.model.order();
    let target = v.target();
    let source = v.sources()[0];
    let inputs = weyl_inputs(v)?;
    let report = reconstruct_m_n(&v.model, target, &inputs, Some(source), &v.settings())?;
    if report.points.len() != v.grid.len() || report.points.iter().zip(&v.grid).any(|(p, l)| p.lambda != *l) {
        return Err(Error::GridMismatch { s: source });
    }
    let mut head = lambda_header();
    internal_header(&mut head, target, n);
    head.extend(["flag", "reason", "sigma_condition", "denominator_condition"].map(String::from));
    let rows = report
        .points
        .iter()
        .map(|pt| {
            let mut row = lambda_row(pt.lambda);
            push_internal(&mut row, pt.m.as_ref().map(|m| &m.m), n);
            row.push(if pt.flag.is_some() { "1".into() } else { "0".into() });
            row.push(pt.flag.clone().unwrap_or_default());
            row.push(num(pt.sigma_condition));
            row.push(num(pt.denominator_condition));
            row
        })
        .collect();
    let extra = format!(" target={target} source={source}");
    let trailer = format!("# valued={} flagged={}", report.valued(), report.flagged());
    Ok(CommandOutput {
        csv: render(manifest(Command::Reconstruct, v, &extra), head, rows, Some(trailer)),
        passed: true,
    })
}

fn run_roundtrip(v: &ValidatedConfig) -> Result<CommandOutput> {
    let target = v.target();
    let sources = v.sources();
    let tol = v.config.params.tolerance;
    let cv = cross_validate(&v.model, target, &sources, &v.grid, &v.settings())?;
    let mut head = lambda_header();
    head.extend(["discrepancy", "spread", "flag", "reason"].map(String::from));
    let report = &cv.reports[0];
    let rows = report
        .points
        .iter()
        .zip(&cv.direct)
        .map(|(pt, d)| {
            let mut row = lambda_row(pt.lambda);
            row.push(match &pt.m {
                Some(m) => num(relative_difference(&m.m, &d.m)),
                None => "nan".into(),
            });
            row.push(pt.spread.map(num).unwrap_or_else(|| "nan".into()));
            row.push(if pt.flag.is_some() { "1".into() } else { "0".into() });
            row.push(pt.flag.clone().unwrap_or_default());
            row
        })
        .collect();
    let passed = cv.max_discrepancy <= tol && report.valued() > 0;
    let srcs: Vec<String> = sources.iter().map(|s| s.to_string()).collect();
    let extra = format!(" target={target} sources={} tolerance={}", srcs.join("+"), num(tol));
    let mut trailer = String::new();
    let _ = write!(
        trailer,
        "# max_discrepancy={} source_spread={} flagged_fraction={} result={}",
        num(cv.max_discrepancy),
        num(cv.source_spread),
        num(report.flagged_fraction()),
        if passed { "pass" } else { "fail" }
    );
    Ok(CommandOutput {
        csv: render(manifest(Command::Roundtrip, v, &extra), head, rows, Some(trailer)),
        passed,
    })
}

/// Runs one command on a validated configuration.
pub fn run_command(v: &ValidatedConfig, cmd: Command) -> Result<CommandOutput> {
    match cmd {
        Command::Validate => Ok(CommandOutput {
            csv: format!("{}\n", manifest(cmd, v, " status=ok")),
            passed: true,
        }),
        Command::Basis => run_basis(v),
        Command::Weyl => run_weyl(v),
        Command::Internal => run_internal(v),
        Command::Eigs => run_eigs(v),
        Command::Asym => run_asym(v),
        Command::Reconstruct => run_reconstruct(v),
        Command::Roundtrip => run_roundtrip(v),
    }
}

/// Full CLI flow; returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = (|| -> Result<i32> {
        let path = cli
            .config
            .as_ref()
            .ok_or_else(|| Error::Schema("--config is required".into()))?;
        let text = std::fs::read_to_string(path)?;
        let v = parse_config(&text)?;
        let out = run_command(&v, cli.command)?;
        match &cli.output {
            Some(p) => std::fs::write(p, &out.csv)?,
            None => print!("{}", out.csv),
        }
        Ok(if out.passed { EXIT_OK } else { EXIT_NUMERICAL })
    })();
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            exit_code(&e)
        }
    }
}
