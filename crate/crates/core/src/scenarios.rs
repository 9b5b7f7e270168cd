//! Kick / measure / observe scenarios over causally ordered regions.

use crate::causal::{self, CausalError, CausalOrder, Region};
use crate::linalg::{self, cr, CMat};
use crate::qops::{self, Bin, DensityState, LocalOperator, ProductSpace, QopsError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Largest operation count for which every linear extension is replayed.
pub const MAX_ORDER_CHECK: usize = 6;
const ORDER_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error(transparent)]
    Causal(#[from] CausalError),
    #[error(transparent)]
    Qops(#[from] QopsError),
    #[error("observations depend on the linear extension (deviation {deviation:e})")]
    OrderSensitivity { deviation: f64 },
    #[error("operation `{op}` acts on factor `{factor}` whose region is spacelike to the operation region")]
    InconsistentRegion { op: String, factor: String },
    #[error("factor `{0}` has no region")]
    UnmappedFactor(String),
    #[error("kick `{op}` is not unitary (defect {defect:e})")]
    NotUnitary { op: String, defect: f64 },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("unknown observable `{0}`")]
    UnknownObservable(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("empty operator basis")]
    BasisEmpty,
    #[error("scenario has no sweep")]
    MissingSweep,
    #[error("empty sweep grid")]
    EmptyGrid,
}

#[derive(Debug, Clone)]
pub enum Kick {
    Unitary(CMat),
    /// `exp(i p H)` with `p` the named parameter.
    Generated { generator: CMat, parameter: String },
}

#[derive(Debug, Clone)]
pub enum OpKind {
    Kick(Kick),
    NonselectiveMeasure { observable: LocalOperator, bins: Option<Vec<Bin>> },
    SelectiveMeasure { projector: LocalOperator },
    Observe { observable: LocalOperator },
}

#[derive(Debug, Clone)]
pub struct LocalOperation {
    pub label: String,
    pub kind: OpKind,
    pub region: Region,
    pub support: Vec<String>,
}

impl LocalOperation {
    pub fn kick(label: &str, region: Region, generator: &LocalOperator, parameter: &str) -> Self {
        LocalOperation {
            label: label.into(),
            kind: OpKind::Kick(Kick::Generated { generator: generator.matrix.clone(), parameter: parameter.into() }),
            region,
            support: generator.support.clone(),
        }
    }

    pub fn kick_unitary(label: &str, region: Region, u: &LocalOperator) -> Self {
        LocalOperation { label: label.into(), kind: OpKind::Kick(Kick::Unitary(u.matrix.clone())), region, support: u.support.clone() }
    }

    pub fn measure(label: &str, region: Region, observable: &LocalOperator, bins: Option<Vec<Bin>>) -> Self {
        LocalOperation {
            label: label.into(),
            kind: OpKind::NonselectiveMeasure { observable: observable.clone(), bins },
            region,
            support: observable.support.clone(),
        }
    }

    pub fn select(label: &str, region: Region, projector: &LocalOperator) -> Self {
        LocalOperation {
            label: label.into(),
            kind: OpKind::SelectiveMeasure { projector: projector.clone() },
            region,
            support: projector.support.clone(),
        }
    }

    pub fn observe(label: &str, region: Region, observable: &LocalOperator) -> Self {
        LocalOperation {
            label: label.into(),
            kind: OpKind::Observe { observable: observable.clone() },
            region,
            support: observable.support.clone(),
        }
    }

    fn operators(&self) -> Vec<&LocalOperator> {
        match &self.kind {
            OpKind::Kick(_) => vec![],
            OpKind::NonselectiveMeasure { observable, .. } => vec![observable],
            OpKind::SelectiveMeasure { projector } => vec![projector],
            OpKind::Observe { observable } => vec![observable],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub parameter: String,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub space: ProductSpace,
    pub factor_regions: BTreeMap<String, Region>,
    pub initial: DensityState,
    pub operations: Vec<LocalOperation>,
    /// Fixed parameter values; the sweep parameter overrides its entry.
    pub params: BTreeMap<String, f64>,
    pub sweep: Option<Sweep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub observations: BTreeMap<String, f64>,
    pub order: Vec<usize>,
    pub extensions_checked: usize,
    pub max_order_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignallingReport {
    pub observable: String,
    pub parameter: String,
    pub grid: Vec<f64>,
    pub baseline: f64,
    pub expectations: Vec<f64>,
    pub deltas: Vec<f64>,
    pub delta_max: f64,
    pub order_check: Option<Vec<f64>>,
}

impl SignallingReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["parameter", "expectation", "delta"]).expect("in-memory write");
        for ((p, e), d) in self.grid.iter().zip(&self.expectations).zip(&self.deltas) {
            w.write_record([crate::cli::fmt17(*p), crate::cli::fmt17(*e), crate::cli::fmt17(*d)]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let tol = qops::tolerances();
        for (label, _) in self.space.factors() {
            if !self.factor_regions.contains_key(label) {
                return Err(ScenarioError::UnmappedFactor(label.clone()));
            }
        }
        for op in &self.operations {
            op.region.validate()?;
            for f in &op.support {
                let fr = self.factor_regions.get(f).ok_or_else(|| ScenarioError::UnmappedFactor(f.clone()))?;
                if causal::spacelike(&op.region, fr) {
                    return Err(ScenarioError::InconsistentRegion { op: op.label.clone(), factor: f.clone() });
                }
            }
            for o in op.operators() {
                if o.space != self.space {
                    return Err(QopsError::SpaceMismatch.into());
                }
                o.verify_support()?;
            }
            match &op.kind {
                OpKind::Kick(Kick::Unitary(u)) => {
                    let defect = linalg::unitarity_defect(u);
                    if defect > tol.operator {
                        return Err(ScenarioError::NotUnitary { op: op.label.clone(), defect });
                    }
                    self.check_dim(u)?;
                }
                OpKind::Kick(Kick::Generated { generator, .. }) => {
                    let defect = linalg::hermiticity_defect(generator);
                    if defect > tol.projector {
                        return Err(QopsError::NotHermitian { defect }.into());
                    }
                    self.check_dim(generator)?;
                }
                OpKind::Observe { observable } | OpKind::NonselectiveMeasure { observable, .. } => {
                    let defect = linalg::hermiticity_defect(&observable.matrix);
                    if defect > tol.projector {
                        return Err(QopsError::NotHermitian { defect }.into());
                    }
                }
                OpKind::SelectiveMeasure { .. } => {}
            }
        }
        if !self.operations.is_empty() {
            self.order()?;
        }
        Ok(())
    }

    fn check_dim(&self, m: &CMat) -> Result<(), ScenarioError> {
        if m.nrows() != self.space.dim() {
            return Err(QopsError::DimensionMismatch { expected: self.space.dim(), got: m.nrows() }.into());
        }
        Ok(())
    }

    /// Partial order of the operations. Operations sharing a region are
    /// ordered by list position.
    pub fn order(&self) -> Result<CausalOrder, ScenarioError> {
        let regions: Vec<Region> = self.operations.iter().map(|o| o.region.clone()).collect();
        let n = regions.len();
        let mut base = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    base[i][j] = if regions[i].kind == regions[j].kind { i < j } else { causal::precedes(&regions[i], &regions[j]) };
                }
            }
        }
        Ok(CausalOrder::from_base(&regions, base)?)
    }

    /// Parameter values at the baseline: fixed params plus the first grid point.
    pub fn baseline_params(&self) -> BTreeMap<String, f64> {
        let mut p = self.params.clone();
        if let Some(s) = &self.sweep {
            if let Some(&g) = s.grid.first() {
                p.insert(s.parameter.clone(), g);
            }
        }
        p
    }

    pub fn run(&self) -> Result<RunResult, ScenarioError> {
        self.run_with(&self.baseline_params())
    }

    pub fn run_with(&self, params: &BTreeMap<String, f64>) -> Result<RunResult, ScenarioError> {
        if self.operations.is_empty() {
            return Ok(RunResult { observations: BTreeMap::new(), order: vec![], extensions_checked: 0, max_order_deviation: 0.0 });
        }
        let prepared = self.prepare(params)?;
        let order = self.order()?;
        let main = order.linear_extension();
        let observations = self.apply(&prepared, &main)?;
        let mut checked = 1;
        let mut deviation = 0.0f64;
        if self.operations.len() <= MAX_ORDER_CHECK {
            let exts = order.linear_extensions()?;
            checked = exts.len();
            for ext in exts.iter().filter(|e| **e != main) {
                let other = self.apply(&prepared, ext)?;
                for (k, v) in &observations {
                    deviation = deviation.max((other[k] - v).abs());
                }
            }
            if deviation > ORDER_TOL {
                return Err(ScenarioError::OrderSensitivity { deviation });
            }
        }
        Ok(RunResult { observations, order: main, extensions_checked: checked, max_order_deviation: deviation })
    }

    fn prepare(&self, params: &BTreeMap<String, f64>) -> Result<Vec<Prepared>, ScenarioError> {
        self.operations
            .iter()
            .map(|op| {
                Ok(match &op.kind {
                    OpKind::Kick(Kick::Unitary(u)) => Prepared::Unitary(u.clone()),
                    OpKind::Kick(Kick::Generated { generator, parameter }) => {
                        let p = *params.get(parameter).ok_or_else(|| ScenarioError::UnknownParameter(parameter.clone()))?;
                        Prepared::Unitary(linalg::exp_i_hermitian(generator, p))
                    }
                    OpKind::NonselectiveMeasure { observable, bins } => {
                        Prepared::Resolution(qops::spectral_resolution(observable, bins.as_deref())?)
                    }
                    OpKind::SelectiveMeasure { projector } => Prepared::Select(projector.clone()),
                    OpKind::Observe { observable } => Prepared::Observe(observable.clone()),
                })
            })
            .collect()
    }

    fn apply(&self, prepared: &[Prepared], order: &[usize]) -> Result<BTreeMap<String, f64>, ScenarioError> {
        let mut rho = self.initial.clone();
        let mut obs = BTreeMap::new();
        for &i in order {
            match &prepared[i] {
                Prepared::Unitary(u) => rho = rho.conjugate(u)?,
                Prepared::Resolution(r) => rho = qops::luders_nonselective(&rho, r)?,
                Prepared::Select(p) => rho = qops::luders_selective(&rho, p)?.0,
                Prepared::Observe(c) => {
                    obs.insert(self.operations[i].label.clone(), qops::expectation(&rho, c)?.re);
                }
            }
        }
        Ok(obs)
    }

    pub fn observable_labels(&self) -> Vec<String> {
        self.operations.iter().filter(|o| matches!(o.kind, OpKind::Observe { .. })).map(|o| o.label.clone()).collect()
    }

    /// Sweep the declared parameter and compare `observable` with the first
    /// grid point.
    pub fn signalling_delta(&self, observable: &str) -> Result<SignallingReport, ScenarioError> {
        let sweep = self.sweep.as_ref().ok_or(ScenarioError::MissingSweep)?;
        self.signalling_delta_on(observable, &sweep.parameter, &sweep.grid)
    }

    pub fn signalling_delta_on(&self, observable: &str, parameter: &str, grid: &[f64]) -> Result<SignallingReport, ScenarioError> {
        if grid.is_empty() {
            return Err(ScenarioError::EmptyGrid);
        }
        if !self.observable_labels().iter().any(|l| l == observable) {
            return Err(ScenarioError::UnknownObservable(observable.into()));
        }
        let uses = self.operations.iter().any(|o| matches!(&o.kind, OpKind::Kick(Kick::Generated { parameter: p, .. }) if p == parameter));
        if !uses && !self.params.contains_key(parameter) {
            return Err(ScenarioError::UnknownParameter(parameter.into()));
        }
        let expectations = grid
            .par_iter()
            .map(|&g| {
                let mut p = self.params.clone();
                p.insert(parameter.to_string(), g);
                self.run_with(&p).map(|r| r.observations[observable])
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let baseline = expectations[0];
        let deltas: Vec<f64> = expectations.iter().map(|e| (e - baseline).abs()).collect();
        let delta_max = deltas.iter().cloned().fold(0.0, f64::max);
        Ok(SignallingReport {
            observable: observable.into(),
            parameter: parameter.into(),
            grid: grid.to_vec(),
            baseline,
            expectations,
            deltas,
            delta_max,
            order_check: None,
        })
    }
}

enum Prepared {
    Unitary(CMat),
    Resolution(qops::ProjectiveResolution),
    Select(LocalOperator),
    Observe(LocalOperator),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BorstenResult {
    pub pass: bool,
    pub max_violation: f64,
    /// Names of the maximising `(A1, A3)` pair.
    pub witness: Option<(String, String)>,
}

/// Operator-level check of `[E(A3), A1] = 0` with `E` the non-selective
/// Lüders map of `a2` under `bins`.
pub fn borsten_check(
    a2: &LocalOperator,
    bins: Option<&[Bin]>,
    alg1: &[(String, LocalOperator)],
    alg3: &[(String, LocalOperator)],
) -> Result<BorstenResult, ScenarioError> {
    if alg1.is_empty() || alg3.is_empty() {
        return Err(ScenarioError::BasisEmpty);
    }
    let r = qops::spectral_resolution(a2, bins)?;
    let mut best = 0.0f64;
    let mut witness = None;
    for (n3, a3) in alg3 {
        let n = a3.matrix.nrows();
        let e3 = r.projectors.iter().fold(CMat::zeros(n, n), |acc, p| acc + &p.matrix * &a3.matrix * &p.matrix);
        for (n1, a1) in alg1 {
            let v = linalg::op_norm(&linalg::commutator(&e3, &a1.matrix));
            if v > best {
                best = v;
                witness = Some((n1.clone(), n3.clone()));
            }
        }
    }
    Ok(BorstenResult { pass: best < qops::tolerances().operator, max_violation: best, witness })
}

/// Hermitian basis of a single factor: identity first, then generalised
/// Gell-Mann matrices (the Pauli matrices for a qubit).
pub fn factor_basis(d: usize) -> Vec<(String, CMat)> {
    if d == 2 {
        let names = ["I", "X", "Y", "Z"];
        return linalg::paulis().into_iter().zip(names).map(|(m, n)| (n.to_string(), m)).collect();
    }
    let mut out = vec![("I".to_string(), linalg::identity(d))];
    for j in 0..d {
        for k in (j + 1)..d {
            let mut s = CMat::zeros(d, d);
            s[(j, k)] = cr(1.0);
            s[(k, j)] = cr(1.0);
            out.push((format!("S{j}{k}"), s));
            let mut a = CMat::zeros(d, d);
            a[(j, k)] = linalg::c(0.0, -1.0);
            a[(k, j)] = linalg::c(0.0, 1.0);
            out.push((format!("A{j}{k}"), a));
        }
    }
    for l in 1..d {
        let mut m = CMat::zeros(d, d);
        let norm = (2.0 / (l * (l + 1)) as f64).sqrt();
        for i in 0..l {
            m[(i, i)] = cr(norm);
        }
        m[(l, l)] = cr(-(l as f64) * norm);
        out.push((format!("D{l}"), m));
    }
    out
}

/// Non-identity products of factor bases over `labels`, embedded in `space`.
/// Names list one token per factor of `space`, e.g. `X⊗I`.
pub fn local_basis<S: AsRef<str>>(space: &ProductSpace, labels: &[S]) -> Result<Vec<(String, LocalOperator)>, ScenarioError> {
    let labels: Vec<String> = labels.iter().map(|s| s.as_ref().to_string()).collect();
    let mut combos: Vec<(Vec<String>, CMat)> = vec![(vec![], linalg::identity(1))];
    for (l, d) in space.factors() {
        let basis = if labels.contains(l) { factor_basis(*d) } else { vec![("I".to_string(), linalg::identity(*d))] };
        combos = combos
            .into_iter()
            .flat_map(|(names, m)| {
                basis.iter().map(move |(n, b)| {
                    let mut names = names.clone();
                    names.push(n.clone());
                    (names, linalg::kron(&m, b))
                })
            })
            .collect();
    }
    for l in &labels {
        space.index_of(l)?;
    }
    let mut out = Vec::new();
    for (names, m) in combos {
        if names.iter().all(|n| n == "I") {
            continue;
        }
        let mut op = LocalOperator::new(space, m)?;
        op.support = labels.clone();
        out.push((names.join("⊗"), op));
    }
    if out.is_empty() {
        return Err(ScenarioError::BasisEmpty);
    }
    Ok(out)
}

pub const PRESETS: [&str; 4] = ["borsten_qubit", "sorkin_qubit_baby", "sorkin_qft_fock", "borsten_additive_control"];

/// Grid `k π / 16` for `k = 0..=16`.
pub fn sixteenth_grid() -> Vec<f64> {
    (0..=16).map(|k| k as f64 * std::f64::consts::PI / 16.0).collect()
}

fn tripartite_scenario(
    space: ProductSpace,
    factors: [(&str, usize); 2],
    initial: DensityState,
    kick: LocalOperation,
    measure: Option<LocalOperation>,
    observe: LocalOperation,
    parameter: &str,
) -> Scenario {
    let [o1, _, o3] = causal::presets::fig2();
    let regions = [o1, o3];
    let factor_regions = factors.iter().map(|(l, i)| (l.to_string(), regions[*i].clone())).collect();
    let mut operations = vec![kick];
    operations.extend(measure);
    operations.push(observe);
    Scenario {
        space,
        factor_regions,
        initial,
        operations,
        params: BTreeMap::new(),
        sweep: Some(Sweep { parameter: parameter.into(), grid: sixteenth_grid() }),
    }
}

fn borsten_family(a2: CMat) -> Result<Scenario, ScenarioError> {
    let [o1, o2, o3] = causal::presets::fig2();
    let space = ProductSpace::qubits(&["q1", "q2"])?;
    let s = 1.0 / 2f64.sqrt();
    let psi = linalg::kron_vec(&linalg::basis_vec(2, 0), &linalg::CVec::from_vec(vec![cr(s), cr(s)]));
    let initial = DensityState::pure(&space, &psi)?;
    let kick = qops::embed(&linalg::pauli_x(), &["q1"], &space)?;
    let a2 = LocalOperator::new(&space, a2)?;
    let c = qops::embed(&linalg::pauli_x(), &["q2"], &space)?;
    Ok(tripartite_scenario(
        space,
        [("q1", 0), ("q2", 1)],
        initial,
        LocalOperation::kick("U", o1.clone(), &kick, "gamma"),
        Some(LocalOperation::measure("A2", o2, &a2, None)),
        LocalOperation::observe("C", o3.clone(), &c),
        "gamma",
    ))
}

/// `|1><1| ⊗ σz`, the degenerate intermediate observable of the qubit example.
pub fn borsten_a2() -> CMat {
    linalg::kron(&linalg::from_real(2, 2, &[0.0, 0.0, 0.0, 1.0]), &linalg::pauli_z())
}

pub fn additive_a2() -> CMat {
    linalg::kron(&linalg::pauli_z(), &linalg::identity(2)) + linalg::kron(&linalg::identity(2), &linalg::pauli_z())
}

/// Normalised `(|vac> + |1_k>)/√2` with `|1_k> = (a1† + a2†)|vac>/√2`.
pub fn fock_psi2(space: &ProductSpace, a: &[LocalOperator]) -> linalg::CVec {
    let vac = linalg::basis_vec(space.dim(), 0);
    let one = (a[0].matrix.adjoint() + a[1].matrix.adjoint()) * &vac / cr(2f64.sqrt());
    (vac + one) / cr(2f64.sqrt())
}

pub fn preset(name: &str) -> Result<Scenario, ScenarioError> {
    match name {
        "borsten_qubit" => borsten_family(borsten_a2()),
        "borsten_additive_control" => borsten_family(additive_a2()),
        "sorkin_qubit_baby" => {
            let [o1, o2, o3] = causal::presets::fig2();
            let space = ProductSpace::qubits(&["q1", "q2"])?;
            let bell = linalg::CVec::from_vec(vec![cr(1.0), cr(0.0), cr(0.0), cr(1.0)]);
            let initial = DensityState::pure(&space, &bell)?;
            let flip = qops::embed(&linalg::pauli_x(), &["q1"], &space)?;
            let s = 1.0 / 2f64.sqrt();
            let zero_plus = linalg::CVec::from_vec(vec![cr(s), cr(s), cr(0.0), cr(0.0)]);
            let p = LocalOperator::new(&space, linalg::ket_bra(&zero_plus))?;
            let c = qops::embed(&linalg::pauli_z(), &["q2"], &space)?;
            Ok(tripartite_scenario(
                space,
                [("q1", 0), ("q2", 1)],
                initial,
                LocalOperation::kick("U", o1, &flip, "lambda"),
                Some(LocalOperation::measure("P2", o2, &p, None)),
                LocalOperation::observe("C", o3, &c),
                "lambda",
            ))
        }
        "sorkin_qft_fock" => {
            let [o1, o2, o3] = causal::presets::fig2();
            let (space, a) = crate::field::truncated_modes(&["k1", "k2"], 3)?;
            let initial = DensityState::pure(&space, &linalg::basis_vec(space.dim(), 0))?;
            let mut phi1 = LocalOperator::new(&space, &a[0].matrix + a[0].matrix.adjoint())?;
            phi1.support = vec!["k1".into()];
            let p2 = LocalOperator::new(&space, linalg::ket_bra(&fock_psi2(&space, &a)))?;
            let mut c = LocalOperator::new(&space, &a[1].matrix + a[1].matrix.adjoint())?;
            c.support = vec!["k2".into()];
            let mut sc = tripartite_scenario(
                space,
                [("k1", 0), ("k2", 1)],
                initial,
                LocalOperation::kick("U", o1, &phi1, "lambda"),
                Some(LocalOperation::measure("P2", o2, &p2, None)),
                LocalOperation::observe("C", o3, &c),
                "lambda",
            );
            sc.sweep = Some(Sweep { parameter: "lambda".into(), grid: sixteenth_grid() });
            Ok(sc)
        }
        other => Err(ScenarioError::UnknownPreset(other.into())),
    }
}

impl Scenario {
    /// Copy without intermediate measurements.
    pub fn without_measurements(&self) -> Scenario {
        let mut s = self.clone();
        s.operations.retain(|o| !matches!(o.kind, OpKind::NonselectiveMeasure { .. } | OpKind::SelectiveMeasure { .. }));
        s
    }

    /// Replace the observable of the named non-selective measurement.
    pub fn with_measurement(&self, label: &str, observable: &LocalOperator) -> Result<Scenario, ScenarioError> {
        let mut s = self.clone();
        let op = s
            .operations
            .iter_mut()
            .find(|o| o.label == label && matches!(o.kind, OpKind::NonselectiveMeasure { .. }))
            .ok_or_else(|| ScenarioError::UnknownObservable(label.into()))?;
        op.kind = OpKind::NonselectiveMeasure { observable: observable.clone(), bins: None };
        op.support = observable.support.clone();
        Ok(s)
    }
}
