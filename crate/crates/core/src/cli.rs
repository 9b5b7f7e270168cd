//! Batch front end: scenario files in, reports and plot-ready tables out.
//!
//! ```text
//! causalq run|check|sweep <file> [--out DIR] [--format csv|json] [--threads N] [--seed S]
//! ```
//!
//! Exit codes: 0 pass, 1 check failure, 2 input error, 3 internal error.

use crate::causal::{self, Region};
use crate::detectors;
use crate::field::TwoPointKernel;
use crate::field::FieldModel;
use crate::fv;
use crate::histories::{self, ConsistencyMode, FamilyStep, HistoryFamily};
use crate::linalg::{self, c, cr, CMat, CVec};
use crate::qops::{self, Bin, DensityState, LocalOperator, ProductSpace};
use crate::scenarios::{self, LocalOperation, Scenario, Sweep};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

/// 17 significant digits.
pub fn fmt17(x: f64) -> String {
    // Drop the sign of negative zero.
    format!("{:.16e}", x + 0.0)
}

pub const TOL_ENV: &str = "CAUSALQ_TOL_OVERRIDES";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("validation error at `{path}`: {message}")]
    Validation { path: String, message: String },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("empty sweep grid")]
    EmptyGrid,
    #[error("cannot read `{path}`: {message}")]
    Input { path: String, message: String },
    #[error("cannot write `{path}`: {message}")]
    Output { path: String, message: String },
    #[error("{0}")]
    Module(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Validation { .. } | CliError::UnknownParameter(_) | CliError::EmptyGrid | CliError::Input { .. } => 2,
            CliError::Output { .. } | CliError::Module(_) => 3,
        }
    }
}

fn invalid(path: impl Into<String>, message: impl ToString) -> CliError {
    CliError::Validation { path: path.into(), message: message.to_string() }
}

fn module(e: impl ToString) -> CliError {
    CliError::Module(e.to_string())
}

// ---------------------------------------------------------------------------
// Scenario file schema

/// Real number or `[re, im]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cx {
    Real(f64),
    Complex([f64; 2]),
}

impl Cx {
    fn value(self) -> linalg::C64 {
        match self {
            Cx::Real(r) => cr(r),
            Cx::Complex([re, im]) => c(re, im),
        }
    }
}

fn one() -> Cx {
    Cx::Real(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometrySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<SpaceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<StateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operations: Option<Vec<OperationSpec>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fv_preset: Option<FvPresetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detectors: Option<DetectorsSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tolerances: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    /// `fig1`, `fig2` or `bipartite`, defining `O1`… before `regions`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regions: Vec<RegionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub label: String,
    /// `[t0, t1, x0, x1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rect: Option<[f64; 4]>,
    /// `[[step, site], …]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<[i64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    pub factors: Vec<FactorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub label: String,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ket: Option<Vec<Cx>>,
    /// One ket per factor, in factor order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product: Option<Vec<Vec<Cx>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<Vec<Vec<Cx>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<usize>,
}

/// Exactly one of `terms`, `matrix`, `ket_projector`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<Vec<TermSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<Cx>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ket_projector: Option<Vec<Cx>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<Vec<String>>,
}

/// `coeff · ⊗_f op_f` with named single-factor operators: `I`, `X`, `Y`,
/// `Z`, `Pplus`, `Pminus` (qubits), `P<k>`, `a`, `ad`, `num`, `quad`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    #[serde(default = "one")]
    pub coeff: Cx,
    pub ops: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKindSpec {
    Kick,
    Measure,
    Select,
    Observe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperationSpec {
    pub label: String,
    pub kind: OpKindSpec,
    pub region: String,
    pub operator: OperatorSpec,
    /// Kicks with a parameter are `exp(i p H)`; without, `operator` is the
    /// unitary itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    List(Vec<f64>),
    Range { start: f64, stop: f64, points: usize },
    /// `pi_sixteenths`: `kπ/16`, `k = 0..=16`.
    Named(String),
}

impl GridSpec {
    pub fn values(&self, path: &str) -> Result<Vec<f64>, CliError> {
        let g = match self {
            GridSpec::List(v) => v.clone(),
            GridSpec::Range { start, stop, points } => linspace(*start, *stop, *points),
            GridSpec::Named(n) if n == "pi_sixteenths" => scenarios::sixteenth_grid(),
            GridSpec::Named(n) => return Err(invalid(path, format!("unknown grid `{n}`"))),
        };
        if g.is_empty() {
            return Err(CliError::EmptyGrid);
        }
        Ok(g)
    }

    /// `start:stop:points`, a comma list, or `pi_sixteenths`.
    pub fn parse(s: &str) -> Result<GridSpec, CliError> {
        let s = s.trim();
        if s.is_empty() {
            return Err(CliError::EmptyGrid);
        }
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| invalid("--grid", format!("`{t}` is not a number")));
        if s == "pi_sixteenths" {
            return Ok(GridSpec::Named(s.into()));
        }
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() == 3 {
            let points = parts[2].trim().parse::<usize>().map_err(|_| invalid("--grid", "point count must be an integer"))?;
            return Ok(GridSpec::Range { start: num(parts[0])?, stop: num(parts[1])?, points });
        }
        Ok(GridSpec::List(s.split(',').map(num).collect::<Result<_, _>>()?))
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceFn {
    CosSquared,
    SinSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    pub column: String,
    pub function: ReferenceFn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: String,
    pub grid: GridSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub steps: Vec<FamilyStepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hamiltonian: Option<OperatorSpec>,
    /// Kick angles for the state-level O1 check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kick_angles: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyStepSpec {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    pub observable: OperatorSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FvPreset {
    ControlledGate,
    Bostelmann,
    BostelmannBroken,
    Corollary6,
    Isomorphism,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FvPresetSpec {
    pub preset: FvPreset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub mass: f64,
    pub sites: usize,
    #[serde(default = "unit")]
    pub spacing: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<i64>,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorPreset {
    TripartiteExtended,
    TripartitePointlike,
    Pairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorsSpec {
    pub preset: DetectorPreset,
}

/// Parse with syntax errors located by line and column and schema errors by
/// field path.
pub fn parse_scenario(text: &str) -> Result<ScenarioFile, CliError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let file: ScenarioFile = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        match inner.classify() {
            serde_json::error::Category::Data => invalid(path, inner),
            _ => CliError::Parse { line: inner.line(), column: inner.column(), message: inner.to_string() },
        }
    })?;
    de.end().map_err(|e| CliError::Parse { line: e.line(), column: e.column(), message: e.to_string() })?;
    Ok(file)
}

impl ScenarioFile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario files serialize")
    }

    pub fn kind(&self) -> Result<Kind, CliError> {
        let present: Vec<Kind> = [
            (self.operations.is_some(), Kind::Scenario),
            (self.family.is_some(), Kind::Histories),
            (self.fv_preset.is_some(), Kind::Fv),
            (self.detectors.is_some(), Kind::Detector),
        ]
        .into_iter()
        .filter_map(|(p, k)| p.then_some(k))
        .collect();
        match present[..] {
            [k] => Ok(k),
            _ => Err(invalid("", "expected exactly one of `operations`, `family`, `fv_preset`, `detectors`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Scenario,
    Histories,
    Fv,
    Detector,
}

// ---------------------------------------------------------------------------
// Building domain objects

fn regions(file: &ScenarioFile) -> Result<BTreeMap<String, Region>, CliError> {
    let mut out = BTreeMap::new();
    let Some(g) = &file.geometry else { return Ok(out) };
    if let Some(p) = &g.preset {
        let list: Vec<Region> = match p.as_str() {
            "fig1" => causal::presets::fig1().to_vec(),
            "fig2" => causal::presets::fig2().to_vec(),
            "bipartite" => causal::presets::bipartite().to_vec(),
            other => return Err(invalid("geometry.preset", format!("unknown geometry preset `{other}`"))),
        };
        out.extend(list.into_iter().map(|r| (r.label.clone(), r)));
    }
    for (i, r) in g.regions.iter().enumerate() {
        let path = format!("geometry.regions[{i}]");
        let region = match (&r.rect, &r.cells) {
            (Some([t0, t1, x0, x1]), None) => Region::rect(&r.label, *t0, *t1, *x0, *x1),
            (None, Some(cells)) => Region::cells(&r.label, cells.iter().map(|c| (c[0], c[1]))),
            _ => return Err(invalid(path, "give exactly one of `rect` and `cells`")),
        }
        .map_err(|e| invalid(&path, e))?;
        out.insert(r.label.clone(), region);
    }
    Ok(out)
}

fn region_ref(map: &BTreeMap<String, Region>, label: &str, path: &str) -> Result<Region, CliError> {
    map.get(label).cloned().ok_or_else(|| invalid(path, format!("unknown region `{label}`")))
}

fn product_space(file: &ScenarioFile) -> Result<ProductSpace, CliError> {
    let s = file.space.as_ref().ok_or_else(|| invalid("space", "missing `space` section"))?;
    let f: Vec<(&str, usize)> = s.factors.iter().map(|f| (f.label.as_str(), f.dim)).collect();
    ProductSpace::new(&f).map_err(|e| invalid("space.factors", e))
}

fn named_factor_op(name: &str, d: usize) -> Option<CMat> {
    let qubit = |m: CMat| (d == 2).then_some(m);
    match name {
        "I" => Some(linalg::identity(d)),
        "X" => qubit(linalg::pauli_x()),
        "Y" => qubit(linalg::pauli_y()),
        "Z" => qubit(linalg::pauli_z()),
        "Pplus" => qubit((linalg::identity(2) + linalg::pauli_x()) * cr(0.5)),
        "Pminus" => qubit((linalg::identity(2) - linalg::pauli_x()) * cr(0.5)),
        "a" => Some(linalg::annihilation(d - 1)),
        "ad" => Some(linalg::annihilation(d - 1).adjoint()),
        "num" => {
            let a = linalg::annihilation(d - 1);
            Some(a.adjoint() * a)
        }
        "quad" => {
            let a = linalg::annihilation(d - 1);
            Some(&a + a.adjoint())
        }
        _ => {
            let k: usize = name.strip_prefix('P')?.parse().ok()?;
            (k < d).then(|| linalg::ket_bra(&linalg::basis_vec(d, k)))
        }
    }
}

fn cvec(v: &[Cx]) -> CVec {
    CVec::from_iterator(v.len(), v.iter().map(|x| x.value()))
}

fn cmat(rows: &[Vec<Cx>], path: &str) -> Result<CMat, CliError> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(invalid(path, "matrix must be square"));
    }
    Ok(CMat::from_fn(n, n, |i, j| rows[i][j].value()))
}

pub fn build_operator(spec: &OperatorSpec, space: &ProductSpace, path: &str) -> Result<LocalOperator, CliError> {
    let (matrix, inferred) = match (&spec.terms, &spec.matrix, &spec.ket_projector) {
        (Some(terms), None, None) => {
            if terms.is_empty() {
                return Err(invalid(format!("{path}.terms"), "no terms"));
            }
            let mut sum = CMat::zeros(space.dim(), space.dim());
            let mut support: Vec<String> = vec![];
            for (i, t) in terms.iter().enumerate() {
                let tp = format!("{path}.terms[{i}]");
                for l in t.ops.keys() {
                    space.index_of(l).map_err(|e| invalid(format!("{tp}.ops.{l}"), e))?;
                }
                let mut parts = vec![];
                for (l, d) in space.factors() {
                    let name = t.ops.get(l).map(String::as_str).unwrap_or("I");
                    let m = named_factor_op(name, *d).ok_or_else(|| invalid(format!("{tp}.ops.{l}"), format!("unknown operator `{name}` for dimension {d}")))?;
                    if name != "I" && !support.contains(l) {
                        support.push(l.clone());
                    }
                    parts.push(m);
                }
                sum += linalg::kron_all(&parts) * t.coeff.value();
            }
            let order = space.labels();
            support.sort_by_key(|l| order.iter().position(|o| o == l));
            (sum, support)
        }
        (None, Some(m), None) => (cmat(m, &format!("{path}.matrix"))?, space.labels()),
        (None, None, Some(k)) => {
            let v = cvec(k);
            let n = v.norm();
            if n == 0.0 {
                return Err(invalid(format!("{path}.ket_projector"), "zero vector"));
            }
            (linalg::ket_bra(&(v / cr(n))), space.labels())
        }
        _ => return Err(invalid(path, "give exactly one of `terms`, `matrix`, `ket_projector`")),
    };
    if matrix.nrows() != space.dim() {
        return Err(invalid(path, format!("dimension {} does not match the space ({})", matrix.nrows(), space.dim())));
    }
    let mut op = LocalOperator::new(space, matrix).map_err(|e| invalid(path, e))?;
    op.support = inferred;
    if let Some(s) = &spec.support {
        op.support = s.clone();
        op.verify_support().map_err(|e| invalid(format!("{path}.support"), e))?;
    }
    Ok(op)
}

fn build_state(spec: Option<&StateSpec>, space: &ProductSpace) -> Result<DensityState, CliError> {
    let spec = spec.ok_or_else(|| invalid("initial", "missing `initial` state"))?;
    let path = "initial";
    let st = match (&spec.ket, &spec.product, &spec.density, spec.basis) {
        (Some(k), None, None, None) => DensityState::pure(space, &cvec(k)),
        (None, Some(parts), None, None) => {
            if parts.len() != space.factors().len() {
                return Err(invalid("initial.product", "need one ket per factor"));
            }
            let v = parts.iter().fold(CVec::from_element(1, cr(1.0)), |acc, k| linalg::kron_vec(&acc, &cvec(k)));
            DensityState::pure(space, &v)
        }
        (None, None, Some(m), None) => DensityState::new(space, cmat(m, "initial.density")?),
        (None, None, None, Some(b)) if b < space.dim() => DensityState::pure(space, &linalg::basis_vec(space.dim(), b)),
        (None, None, None, Some(_)) => return Err(invalid("initial.basis", "basis index out of range")),
        _ => return Err(invalid(path, "give exactly one of `ket`, `product`, `density`, `basis`")),
    };
    st.map_err(|e| invalid(path, e))
}

pub fn build_scenario(file: &ScenarioFile) -> Result<Scenario, CliError> {
    let regs = regions(file)?;
    let space = product_space(file)?;
    let mut factor_regions = BTreeMap::new();
    for (i, f) in file.space.as_ref().expect("checked above").factors.iter().enumerate() {
        let path = format!("space.factors[{i}].region");
        let label = f.region.as_ref().ok_or_else(|| invalid(&path, "scenario factors need a region"))?;
        factor_regions.insert(f.label.clone(), region_ref(&regs, label, &path)?);
    }
    let initial = build_state(file.initial.as_ref(), &space)?;
    let mut operations = vec![];
    for (i, o) in file.operations.as_deref().unwrap_or_default().iter().enumerate() {
        let path = format!("operations[{i}]");
        let region = region_ref(&regs, &o.region, &format!("{path}.region"))?;
        let op = build_operator(&o.operator, &space, &format!("{path}.operator"))?;
        let bins = o.bins.as_ref().map(|b| b.iter().map(|[lo, hi]| Bin::new(*lo, *hi)).collect::<Vec<_>>());
        if bins.is_some() && o.kind != OpKindSpec::Measure {
            return Err(invalid(format!("{path}.bins"), "bins apply to measurements only"));
        }
        if o.parameter.is_some() && o.kind != OpKindSpec::Kick {
            return Err(invalid(format!("{path}.parameter"), "parameters apply to kicks only"));
        }
        operations.push(match o.kind {
            OpKindSpec::Kick => match &o.parameter {
                Some(p) => LocalOperation::kick(&o.label, region, &op, p),
                None => LocalOperation::kick_unitary(&o.label, region, &op),
            },
            OpKindSpec::Measure => LocalOperation::measure(&o.label, region, &op, bins),
            OpKindSpec::Select => LocalOperation::select(&o.label, region, &op),
            OpKindSpec::Observe => LocalOperation::observe(&o.label, region, &op),
        });
    }
    let sweep = match &file.sweep {
        Some(s) => Some(Sweep { parameter: s.parameter.clone(), grid: s.grid.values("sweep.grid")? }),
        None => None,
    };
    let sc = Scenario { space, factor_regions, initial, operations, params: file.params.clone(), sweep };
    sc.validate().map_err(|e| invalid("operations", e))?;
    Ok(sc)
}

pub fn build_family(file: &ScenarioFile) -> Result<(HistoryFamily, CMat), CliError> {
    let spec = file.family.as_ref().expect("histories kind");
    let space = product_space(file)?;
    let regs = regions(file)?;
    let rho = build_state(file.initial.as_ref(), &space)?.matrix;
    if spec.steps.is_empty() {
        return Err(invalid("family.steps", "no steps"));
    }
    let mut res = vec![];
    for (i, s) in spec.steps.iter().enumerate() {
        let path = format!("family.steps[{i}].observable");
        let op = build_operator(&s.observable, &space, &path)?;
        res.push(qops::spectral_resolution(&op, None).map_err(|e| invalid(&path, e))?);
    }
    let with_regions = spec.steps.iter().filter(|s| s.region.is_some()).count();
    let fam = if with_regions == spec.steps.len() {
        if spec.hamiltonian.is_some() {
            return Err(invalid("family.hamiltonian", "region-labelled families take Heisenberg-picture observables"));
        }
        let mut steps = vec![];
        for (i, (s, r)) in spec.steps.iter().zip(res).enumerate() {
            let mut region = region_ref(&regs, s.region.as_ref().expect("counted"), &format!("family.steps[{i}].region"))?;
            region.label = s.label.clone();
            steps.push((region, r));
        }
        HistoryFamily::from_regions(steps)
    } else if with_regions == 0 {
        let timed: Vec<(String, f64, qops::ProjectiveResolution)> =
            spec.steps.iter().zip(res).enumerate().map(|(i, (s, r))| (s.label.clone(), s.time.unwrap_or(i as f64), r)).collect();
        match &spec.hamiltonian {
            Some(h) => HistoryFamily::with_dynamics(timed, &build_operator(h, &space, "family.hamiltonian")?.matrix),
            None => HistoryFamily::new(timed.into_iter().map(|(label, time, resolution)| FamilyStep { label, time, resolution }).collect()),
        }
    } else {
        return Err(invalid("family.steps", "either every step or no step names a region"));
    };
    Ok((fam.map_err(|e| invalid("family", e))?, rho))
}

fn apply_tolerances(file: &ScenarioFile) -> Result<(), CliError> {
    let mut t = qops::Tolerances::default();
    if let Some(p) = std::env::var_os(TOL_ENV) {
        let path = PathBuf::from(p);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Input { path: path.display().to_string(), message: e.to_string() })?;
        let map: BTreeMap<String, f64> = serde_json::from_str(&text).map_err(|e| CliError::Parse { line: e.line(), column: e.column(), message: format!("{TOL_ENV}: {e}") })?;
        for (k, v) in map {
            if !t.set_key(&k, v) {
                return Err(invalid(format!("{TOL_ENV}.{k}"), "unknown tolerance key"));
            }
        }
    }
    for (k, v) in &file.tolerances {
        if !t.set_key(k, *v) {
            return Err(invalid(format!("tolerances.{k}"), "unknown tolerance key"));
        }
    }
    qops::set_tolerances(t);
    Ok(())
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CheckResult {
    fn measured(name: impl Into<String>, value: f64) -> Self {
        CheckResult { name: name.into(), status: Status::Measured, value: Some(value), threshold: None, detail: None }
    }

    /// Pass iff `value < threshold`.
    fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        CheckResult { name: name.into(), status: if value < threshold { Status::Pass } else { Status::Fail }, value: Some(value), threshold: Some(threshold), detail: None }
    }

    fn flag(name: impl Into<String>, ok: bool, detail: Option<String>) -> Self {
        CheckResult { name: name.into(), status: if ok { Status::Pass } else { Status::Fail }, value: None, threshold: None, detail }
    }

    fn with_detail(mut self, d: impl Into<String>) -> Self {
        self.detail = Some(d.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timings {
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub kind: Kind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suite: Option<String>,
    pub scenario: String,
    pub inputs_digest: String,
    pub seed: u64,
    pub pass: bool,
    pub checks: Vec<CheckResult>,
    pub data: serde_json::Value,
    pub timings: Timings,
}

struct Outcome {
    checks: Vec<CheckResult>,
    data: serde_json::Value,
    csv: Option<String>,
}

fn csv_table(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r.iter().map(|v| fmt17(*v))).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
}

/// JSON with every float at 17 significant digits.
pub fn to_json17<T: Serialize>(v: &T) -> String {
    struct F(serde_json::ser::PrettyFormatter<'static>);
    macro_rules! delegate {
        ($($name:ident($($arg:ident: $t:ty),*)),* $(,)?) => {$(
            fn $name<W: ?Sized + Write>(&mut self, w: &mut W $(, $arg: $t)*) -> io::Result<()> { self.0.$name(w $(, $arg)*) }
        )*};
    }
    impl serde_json::ser::Formatter for F {
        fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
            w.write_all(fmt17(v).as_bytes())
        }
        delegate!(
            begin_array(),
            end_array(),
            begin_array_value(first: bool),
            end_array_value(),
            begin_object(),
            end_object(),
            begin_object_key(first: bool),
            begin_object_value(),
            end_object_value(),
        );
    }
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, F(serde_json::ser::PrettyFormatter::new()));
    v.serialize(&mut ser).expect("reports serialize");
    String::from_utf8(out).expect("utf8 json")
}

// ---------------------------------------------------------------------------
// Executors

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Borsten,
    Fuksa,
    Fv,
    Detector,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    Run,
    Check(Suite),
    Sweep { param: String, grid: GridSpec },
}

fn reference_value(f: ReferenceFn, x: f64) -> f64 {
    match f {
        ReferenceFn::CosSquared => x.cos().powi(2),
        ReferenceFn::SinSquared => x.sin().powi(2),
    }
}

fn sweep_table(sc: &Scenario, param: &str, grid: &[f64], reference: Option<&ReferenceSpec>) -> Result<(Vec<CheckResult>, serde_json::Value, String), CliError> {
    let mut checks = vec![];
    let mut reports = vec![];
    for obs in sc.observable_labels() {
        let r = sc.signalling_delta_on(&obs, param, grid).map_err(|e| match e {
            scenarios::ScenarioError::UnknownParameter(p) => CliError::UnknownParameter(p),
            scenarios::ScenarioError::EmptyGrid => CliError::EmptyGrid,
            other => module(other),
        })?;
        checks.push(CheckResult::measured(format!("{obs}.delta_max"), r.delta_max));
        reports.push(r);
    }
    let mut header = vec![param.to_string()];
    for r in &reports {
        header.push(r.observable.clone());
        header.push(format!("delta_{}", r.observable));
    }
    if let Some(rf) = reference {
        header.push(rf.column.clone());
    }
    let mut rows = vec![];
    for (k, &g) in grid.iter().enumerate() {
        let mut row = vec![g];
        for r in &reports {
            row.push(r.expectations[k]);
            row.push(r.deltas[k]);
        }
        if let Some(rf) = reference {
            row.push(reference_value(rf.function, g));
        }
        rows.push(row);
    }
    if let Some(rf) = reference {
        for r in &reports {
            let dev = grid.iter().zip(&r.expectations).map(|(&g, e)| (e - reference_value(rf.function, g)).abs()).fold(0.0, f64::max);
            checks.push(CheckResult::measured(format!("{}.max_deviation_from_{}", r.observable, rf.column), dev));
        }
    }
    Ok((checks, serde_json::to_value(&reports).expect("serializable"), csv_table(&header, &rows)))
}

fn exec_scenario(file: &ScenarioFile, mode: &Mode) -> Result<Outcome, CliError> {
    let sc = build_scenario(file)?;
    match mode {
        Mode::Run => {
            let r = sc.run().map_err(module)?;
            let mut checks: Vec<CheckResult> = r.observations.iter().map(|(k, v)| CheckResult::measured(format!("observe.{k}"), *v)).collect();
            checks.push(CheckResult::measured("order.max_deviation", r.max_order_deviation));
            let mut data = serde_json::json!({ "observations": r.observations, "extensions_checked": r.extensions_checked });
            let mut csv = None;
            if let Some(s) = &sc.sweep {
                let (c, d, t) = sweep_table(&sc, &s.parameter, &s.grid, file.sweep.as_ref().and_then(|s| s.reference.as_ref()))?;
                checks.extend(c);
                data["sweep"] = d;
                csv = Some(t);
            }
            Ok(Outcome { checks, data, csv })
        }
        Mode::Sweep { param, grid } => {
            let g = grid.values("--grid")?;
            let (checks, data, csv) = sweep_table(&sc, param, &g, file.sweep.as_ref().filter(|s| &s.parameter == param).and_then(|s| s.reference.as_ref()))?;
            Ok(Outcome { checks, data: serde_json::json!({ "sweep": data }), csv: Some(csv) })
        }
        Mode::Check(_) => {
            let find = |k: OpKindSpec| file.operations.as_deref().unwrap_or_default().iter().position(|o| o.kind == k);
            let (ik, im, io) = match (find(OpKindSpec::Kick), find(OpKindSpec::Measure), find(OpKindSpec::Observe)) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => return Err(invalid("operations", "the borsten suite needs a kick, a measurement and an observation")),
            };
            let (kick, meas, obs) = (&sc.operations[ik], &sc.operations[im], &sc.operations[io]);
            let (a2, bins) = match &meas.kind {
                scenarios::OpKind::NonselectiveMeasure { observable, bins } => (observable, bins),
                _ => unreachable!("found by kind"),
            };
            let alg1 = scenarios::local_basis(&sc.space, &kick.support).map_err(|e| invalid(format!("operations[{ik}]"), e))?;
            let alg3 = scenarios::local_basis(&sc.space, &obs.support).map_err(|e| invalid(format!("operations[{io}]"), e))?;
            let r = scenarios::borsten_check(a2, bins.as_deref(), &alg1, &alg3).map_err(module)?;
            let mut c = CheckResult::below("borsten.violation", r.max_violation, qops::tolerances().operator);
            if let Some((w1, w3)) = &r.witness {
                if !r.pass {
                    c = c.with_detail(format!("witness A1 = {w1}, A3 = {w3}"));
                }
            }
            let mut checks = vec![c];
            let mut data = serde_json::to_value(&r).expect("serializable");
            if let Some(s) = &sc.sweep {
                let (cs, d, _) = sweep_table(&sc, &s.parameter, &s.grid, None)?;
                checks.extend(cs);
                data["sweep"] = d;
            }
            Ok(Outcome { checks, data, csv: None })
        }
    }
}

fn random_states(seed: u64, dim: usize, n: usize) -> Vec<CMat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| linalg::random_density(&mut rng, dim)).collect()
}

fn exec_histories(file: &ScenarioFile, mode: &Mode, seed: u64) -> Result<Outcome, CliError> {
    let (fam, rho) = build_family(file)?;
    match mode {
        Mode::Run => {
            let dm = histories::decoherence(&fam, &rho);
            let weak = histories::consistency_check(&fam, &rho, ConsistencyMode::Weak);
            let strong = histories::consistency_check(&fam, &rho, ConsistencyMode::Strong);
            let checks = vec![
                CheckResult::below("decoherence.hermiticity_defect", dm.hermiticity_defect(), 1e-10),
                CheckResult::below("decoherence.diagonal_sum_defect", (dm.diagonal_sum() - 1.0).abs(), 1e-10),
                CheckResult::measured("consistency.weak.max_violation", weak.max_violation),
                CheckResult::measured("consistency.strong.max_violation", strong.max_violation),
            ];
            let data = serde_json::json!({
                "order": fam.steps.iter().map(|s| s.label.clone()).collect::<Vec<_>>(),
                "histories": dm.histories,
                "probabilities": dm.probabilities(),
                "weak_consistent": weak.pass,
                "strong_consistent": strong.pass,
            });
            Ok(Outcome { checks, data, csv: Some(dm.to_csv()) })
        }
        Mode::Check(_) => {
            let r: Vec<&qops::ProjectiveResolution> = fam.steps.iter().map(|s| &s.resolution).collect();
            match r.len() {
                0 | 1 => Err(invalid("family.steps", "the fuksa suite needs at least two steps")),
                2 => {
                    let b = histories::fuksa_bipartite(r[0], r[1], &rho).map_err(module)?;
                    let checks = vec![
                        CheckResult::measured("fuksa.consistency_wrt_first", b.max_consistency),
                        CheckResult::measured("fuksa.marginal_shift", b.max_shift),
                        CheckResult::flag("fuksa.implication", b.implication_holds, None),
                    ];
                    Ok(Outcome { checks, data: serde_json::to_value(&b).expect("serializable"), csv: None })
                }
                n => {
                    let t = histories::fuksa_chain(r[0], &r[1..n - 1], r[n - 1]).map_err(|e| match e {
                        histories::HistoriesError::CommutationPrecondition { .. } => invalid("family.steps", e),
                        other => module(other),
                    })?;
                    let states = random_states(seed, fam.space().dim(), 8);
                    let angles = file.family.as_ref().and_then(|f| f.kick_angles.clone()).unwrap_or_else(|| vec![0.3, 1.1, 2.0]);
                    let k = histories::kick_independence(r[0], &r[1..], &states, &angles).map_err(module)?;
                    let mut checks = vec![CheckResult::below("fuksa.condition.max_norm", t.max_norm, histories::CONSISTENCY_TOL).with_detail(format!("{} operator conditions", t.conditions))];
                    checks.push(CheckResult::measured("fuksa.state.measurement_shift", k.measurement_shift));
                    checks.push(CheckResult::measured("fuksa.state.kick_shift", k.kick_shift));
                    Ok(Outcome { checks, data: serde_json::json!({ "conditions": t, "state_level": k }), csv: None })
                }
            }
        }
        Mode::Sweep { param, .. } => Err(CliError::UnknownParameter(param.clone())),
    }
}

fn exec_fv(file: &ScenarioFile, mode: &Mode, seed: u64) -> Result<Outcome, CliError> {
    if let Mode::Sweep { param, .. } = mode {
        return Err(CliError::UnknownParameter(param.clone()));
    }
    let spec = file.fv_preset.as_ref().expect("fv kind");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = 1e-10;
    let (checks, data) = match spec.preset {
        FvPreset::ControlledGate => {
            let sys = fv::controlled_gate();
            let theta = sys.scattering_map(&sys.all_coupled());
            let p1 = linalg::ket_bra(&linalg::basis_vec(2, 1));
            let e = fv::induced_observable(&sys, &theta, 0, &p1).map_err(module)?;
            let res = linalg::max_abs(&(&e - &p1));
            (vec![CheckResult::below("fv.controlled_gate.induced_residual", res, tol)], serde_json::json!({ "induced_diagonal": [e[(0, 0)].re, e[(1, 1)].re] }))
        }
        FvPreset::Isomorphism => {
            let sys = fv::random_orderable(spec.sites.unwrap_or(3), spec.steps.unwrap_or(3), &mut rng);
            let d = sys.scattering_map(&sys.all_coupled()).isomorphism_defect(&mut rng, spec.instances.unwrap_or(100));
            (vec![CheckResult::below("fv.isomorphism.defect", d, tol)], serde_json::json!({ "defect": d }))
        }
        FvPreset::Corollary6 => {
            let n = spec.instances.unwrap_or(20);
            let (mut res, mut fact, mut ord) = (0.0f64, 0.0f64, 0.0f64);
            let mut spacelike = 0;
            for _ in 0..n {
                let sys = fv::random_orderable(spec.sites.unwrap_or(3), spec.steps.unwrap_or(3), &mut rng);
                let sub = sys.space.subspace(&sys.system_labels()).map_err(module)?;
                let omega = DensityState::new(&sub, linalg::random_density(&mut rng, sub.dim())).map_err(module)?;
                let b1 = random_effect(&mut rng);
                let b2 = random_effect(&mut rng);
                let r = fv::corollary6_check(&sys, &omega, &b1, &b2).map_err(module)?;
                res = res.max(r.residual);
                fact = fact.max(r.factorization_residual);
                if let Some(o) = r.order_residual {
                    ord = ord.max(o);
                    spacelike += 1;
                }
            }
            let checks = vec![
                CheckResult::below("fv.corollary6.residual", res, tol),
                CheckResult::below("fv.corollary6.factorization_residual", fact, tol),
                CheckResult::below("fv.corollary6.order_residual", ord, tol).with_detail(format!("{spacelike} spacelike instances")),
            ];
            (checks, serde_json::json!({ "instances": n, "residual": res, "factorization_residual": fact, "order_residual": ord }))
        }
        FvPreset::Bostelmann | FvPreset::BostelmannBroken => {
            let (sys, c) = fv::bostelmann(spec.preset == FvPreset::Bostelmann, &mut rng);
            let r = fv::bostelmann_check(&sys, &c, false).map_err(module)?;
            let o3: Vec<_> = c.iter().map(|p| p.0).collect();
            let diag = match fv::bostelmann_geometry(&sys, &o3) {
                Ok(_) => "geometry satisfied".to_string(),
                Err(e) => e.to_string(),
            };
            let omega = linalg::random_density(&mut rng, 1 << sys.circuit.n_sites);
            let variants: Vec<Vec<(i64, CMat)>> =
                (0..4).map(|_| sys.probes[0].gates.iter().map(|(t, _)| (*t, linalg::random_unitary(&mut rng, 4))).collect()).collect();
            let spread = fv::bostelmann_state_spread(&sys, &c, &omega, &variants).map_err(module)?;
            let checks = vec![
                CheckResult::flag("fv.bostelmann.geometry", r.geometry_ok, Some(diag.clone())),
                CheckResult::below("fv.bostelmann.residual", r.residual, tol),
                CheckResult::below("fv.bostelmann.state_spread", spread, tol),
            ];
            (checks, serde_json::json!({ "residual": r.residual, "dependency": r.dependency, "geometry": diag, "state_spread": spread }))
        }
    };
    Ok(Outcome { checks, data, csv: None })
}

fn random_effect(rng: &mut ChaCha8Rng) -> CMat {
    use rand::Rng;
    let u = linalg::random_unitary(rng, 2);
    let d = CMat::from_diagonal(&CVec::from_vec(vec![cr(rng.gen()), cr(rng.gen())]));
    &u * d * u.adjoint()
}

fn exec_detector(file: &ScenarioFile, mode: &Mode) -> Result<Outcome, CliError> {
    let spec = file.detectors.as_ref().expect("detector kind");
    match spec.preset {
        DetectorPreset::TripartiteExtended | DetectorPreset::TripartitePointlike => {
            if file.field.is_some() {
                return Err(invalid("field", "the tripartite presets fix their own lattice"));
            }
            let name = if spec.preset == DetectorPreset::TripartiteExtended { "extended" } else { "pointlike" };
            let (model, setup) = detectors::tripartite_preset(name).map_err(module)?;
            let kernel = TwoPointKernel::build(&model);
            let r = detectors::tripartite_order_count(&setup, &kernel).map_err(module)?;
            let contribution = |order: usize, lambda: f64| -> f64 {
                r.coefficients
                    .iter()
                    .filter(|c| c.kick > 0 && (c.lambda_a + c.lambda_b + c.kick) as usize == order)
                    .map(|c| c.re * lambda.powi((c.lambda_a + c.lambda_b) as i32))
                    .sum()
            };
            match mode {
                Mode::Sweep { param, grid } => {
                    if param != "lambda" {
                        return Err(CliError::UnknownParameter(param.clone()));
                    }
                    let g = grid.values("--grid")?;
                    let mut header = vec!["lambda".to_string()];
                    header.extend((1..=setup.max_order).map(|n| format!("order_{n}")));
                    let rows: Vec<Vec<f64>> = g.iter().map(|&l| std::iter::once(l).chain((1..=setup.max_order).map(|n| contribution(n, l))).collect()).collect();
                    Ok(Outcome { checks: vec![], data: serde_json::to_value(&r).expect("serializable"), csv: Some(csv_table(&header, &rows)) })
                }
                _ => {
                    let mut checks: Vec<CheckResult> = r
                        .per_order
                        .iter()
                        .map(|e| {
                            let c = CheckResult::below(format!("detector.order_{}.kick_dependence", e.order), e.kick_dependence, r.threshold);
                            if matches!(mode, Mode::Run) {
                                CheckResult { status: Status::Measured, ..c }
                            } else {
                                c
                            }
                        })
                        .collect();
                    checks.push(CheckResult::measured("detector.first_nonzero_order", r.first_nonzero_order.map_or(0.0, |o| o as f64)));
                    Ok(Outcome { checks, data: serde_json::to_value(&r).expect("serializable"), csv: None })
                }
            }
        }
        DetectorPreset::Pairs => {
            if let Mode::Sweep { param, .. } = mode {
                return Err(CliError::UnknownParameter(param.clone()));
            }
            let f = file.field.clone().unwrap_or(FieldSpec { mass: 0.0, sites: 64, spacing: 1.0, window: Some(24) });
            let model = FieldModel::with_options(f.mass, f.sites, f.spacing, true, f.window.unwrap_or(f.sites as i64)).map_err(|e| invalid("field", e))?;
            let kernel = TwoPointKernel::build(&model);
            let mut checks = vec![];
            let mut rows = vec![];
            for (name, a, b, ra, rb) in detectors::pair_presets() {
                let split = detectors::signal_noise_split(&a, &b, &kernel, &ra, &rb).map_err(module)?;
                let sigma = detectors::sigma_operator(&a, &ra, &b, &kernel).map_err(module)?;
                let via_sigma = linalg::commutator(&sigma, &rb) * c(0.0, -1.0);
                let match_res = linalg::max_abs(&(&via_sigma - &split.signal));
                let norm = linalg::trace_norm(&split.signal);
                let spacelike = causal::spacelike(&a.region(), &b.region());
                checks.push(CheckResult::below(format!("detector.{name}.sigma_residual"), match_res, 1e-10));
                checks.push(if spacelike { CheckResult::below(format!("detector.{name}.signal"), norm, 1e-12) } else { CheckResult::measured(format!("detector.{name}.signal"), norm) });
                rows.push(serde_json::json!({ "name": name, "spacelike": spacelike, "signal_trace_norm": norm, "sigma_residual": match_res }));
            }
            Ok(Outcome { checks, data: serde_json::Value::Array(rows), csv: None })
        }
    }
}

/// Execute a parsed file. The report's pass flag is false iff a check failed.
pub fn execute(file: &ScenarioFile, digest: &str, mode: &Mode, seed: Option<u64>) -> Result<(RunReport, Option<String>), CliError> {
    let start = Instant::now();
    apply_tolerances(file)?;
    let kind = file.kind()?;
    let seed = seed.or(file.seed).unwrap_or(0);
    if let Mode::Check(s) = mode {
        let expected = match kind {
            Kind::Scenario => Suite::Borsten,
            Kind::Histories => Suite::Fuksa,
            Kind::Fv => Suite::Fv,
            Kind::Detector => Suite::Detector,
        };
        if *s != expected {
            return Err(invalid("--suite", format!("a {kind:?} file takes the {expected:?} suite").to_lowercase()));
        }
    }
    let out = match kind {
        Kind::Scenario => exec_scenario(file, mode),
        Kind::Histories => exec_histories(file, mode, seed),
        Kind::Fv => exec_fv(file, mode, seed),
        Kind::Detector => exec_detector(file, mode),
    }?;
    let pass = out.checks.iter().all(|c| c.status != Status::Fail);
    let (command, suite) = match mode {
        Mode::Run => ("run", None),
        Mode::Check(s) => ("check", Some(format!("{s:?}").to_lowercase())),
        Mode::Sweep { .. } => ("sweep", None),
    };
    let report = RunReport {
        tool: "causalq".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        kind,
        suite,
        scenario: file.name.clone(),
        inputs_digest: digest.into(),
        seed,
        pass,
        checks: out.checks,
        data: out.data,
        timings: Timings { total_seconds: start.elapsed().as_secs_f64() },
    };
    Ok((report, out.csv))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load(path: &Path) -> Result<(ScenarioFile, String), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Input { path: path.display().to_string(), message: e.to_string() })?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| CliError::Input { path: path.display().to_string(), message: e.to_string() })?;
    Ok((parse_scenario(&text)?, sha256_hex(&bytes)))
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct Common {
    pub file: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute a scenario file.
    Run(Common),
    /// Run a condition checker; exit 0 iff it passes.
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        suite: Suite,
    },
    /// Evaluate over a parameter grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        #[arg(long)]
        grid: String,
    },
}

#[derive(Debug, Parser)]
#[command(name = "causalq", version, about = "No-signalling checks for relativistic quantum measurement models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Output { path: path.display().to_string(), message: e.to_string() })
}

fn dispatch(cli: Cli) -> Result<bool, CliError> {
    let (common, mode) = match cli.command {
        Command::Run(c) => (c, Mode::Run),
        Command::Check { common, suite } => (common, Mode::Check(suite)),
        Command::Sweep { common, param, grid } => (common, Mode::Sweep { param, grid: GridSpec::parse(&grid)? }),
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(invalid("--threads", "need at least one thread"));
        }
        // Fails only if a pool already exists, which keeps the earlier one.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let (file, digest) = load(&common.file)?;
    let (report, csv) = execute(&file, &digest, &mode, common.seed)?;
    let json = to_json17(&report);
    for c in &report.checks {
        let status = match c.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Measured => "----",
        };
        let value = c.value.map(fmt17).unwrap_or_default();
        let detail = c.detail.as_deref().map(|d| format!("  ({d})")).unwrap_or_default();
        eprintln!("{status} {} {value}{detail}", c.name);
    }
    match &common.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Output { path: dir.display().to_string(), message: e.to_string() })?;
            write_file(&dir.join("report.json"), &json)?;
            if let (Format::Csv, Some(t)) = (common.format, &csv) {
                write_file(&dir.join(format!("{}.csv", file.name)), t)?;
            }
        }
        None => {
            let text = match (common.format, &csv) {
                (Format::Csv, Some(t)) => t.clone(),
                _ => json + "\n",
            };
            io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Output { path: "stdout".into(), message: e.to_string() })?;
        }
    }
    Ok(report.pass)
}

/// Entry point; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt17_digits() {
        assert_eq!(fmt17(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt17(-2.0), "-2.0000000000000000e0");
        let v: f64 = fmt17(std::f64::consts::PI).parse().unwrap();
        assert_eq!(v, std::f64::consts::PI);
    }

    #[test]
    fn json17_is_valid_json() {
        let s = to_json17(&serde_json::json!({ "x": 0.1, "y": [1.5, -3.0e-20], "n": 3 }));
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["x"].as_f64(), Some(0.1));
        assert!(s.contains("1.0000000000000001e-1"));
    }

    #[test]
    fn parse_errors_are_located() {
        match parse_scenario("{\n  \"name\": \"x\",\n  oops\n}") {
            Err(CliError::Parse { line, column, .. }) => assert_eq!((line, column), (3, 3)),
            other => panic!("{other:?}"),
        }
        match parse_scenario(r#"{"name": "x", "fv_preset": {"preset": "corollary6", "bogus": 1}}"#) {
            Err(CliError::Validation { path, .. }) => assert_eq!(path, "fv_preset.bogus"),
            other => panic!("{other:?}"),
        }
        match parse_scenario(r#"{"name": "x", "colour": 1}"#) {
            Err(CliError::Validation { message, .. }) => assert!(message.contains("colour")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(GridSpec::parse("0:1:3").unwrap().values("g").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(GridSpec::parse("1,2.5").unwrap().values("g").unwrap(), vec![1.0, 2.5]);
        assert!(matches!(GridSpec::parse(""), Err(CliError::EmptyGrid)));
        assert!(matches!(GridSpec::parse("0:1:0").unwrap().values("g"), Err(CliError::EmptyGrid)));
        assert_eq!(GridSpec::parse("pi_sixteenths").unwrap().values("g").unwrap().len(), 17);
    }

    #[test]
    fn named_operators() {
        let space = ProductSpace::qubits(&["a", "b"]).unwrap();
        let spec = OperatorSpec {
            terms: Some(vec![TermSpec { coeff: Cx::Real(1.0), ops: [("a".to_string(), "P1".to_string()), ("b".to_string(), "Z".to_string())].into_iter().collect() }]),
            matrix: None,
            ket_projector: None,
            support: None,
        };
        let op = build_operator(&spec, &space, "op").unwrap();
        assert!(linalg::max_abs(&(op.matrix - scenarios::borsten_a2())) < 1e-15);
        assert_eq!(op.support, vec!["a", "b"]);
        let bad = OperatorSpec { terms: Some(vec![TermSpec { coeff: one(), ops: [("c".to_string(), "X".to_string())].into_iter().collect() }]), ..spec };
        assert!(matches!(build_operator(&bad, &space, "op"), Err(CliError::Validation { path, .. }) if path == "op.terms[0].ops.c"));
    }
}
