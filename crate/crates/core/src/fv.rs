//! Measurement schemes on a brickwork circuit with pointlike probe qubits.
//!
//! A cell `(t, x)` is site `x` after `t` layers. At step `t` the probe
//! coupling gates act first, then the system layer `t`, then every probe's
//! free unitary. Operators are written in the interaction picture: the cell
//! operator `X_(t, x) = V₀(t)† X_x V₀(t)`. Two cells are spacelike iff
//! `|Δx| > |Δt|`, and spacelike cell operators commute exactly because each
//! layer widens supports by at most one site.
//!
//! The scattering map is `Θ(X) = S† X S` with `S = V₀† V`.

use crate::causal::Region;
use crate::field::Cell;
use crate::linalg::{self, cr, CMat};
use crate::qops::{self, DensityState, ProductSpace, QopsError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FvError {
    #[error("invalid circuit: {0}")]
    InvalidCircuit(String),
    #[error("probe `{probe}` couples at cell {cell:?} outside its declared region")]
    CouplingOutsideK { probe: String, cell: Cell },
    #[error("probe `{probe}` couples at step {step} outside the circuit window")]
    OutOfWindow { probe: String, step: i64 },
    #[error("coupling regions are not causally orderable")]
    NotCausallyOrderable,
    #[error("geometry violation: {0}")]
    GeometryViolation(String),
    #[error("probe effect is not an effect")]
    NotEffect,
    #[error(transparent)]
    Qops(#[from] QopsError),
}

/// Cells are causally related iff `|Δx| ≤ |Δt|`.
pub fn related(a: Cell, b: Cell) -> bool {
    (a.1 - b.1).abs() <= (a.0 - b.0).abs()
}

/// `a ∈ J⁻(b)`.
pub fn in_past(a: Cell, b: Cell) -> bool {
    a.0 <= b.0 && related(a, b)
}

/// Two-site gate on `(site, site + 1)` in layer `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub step: i64,
    pub site: usize,
    pub unitary: CMat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircuitSpacetime {
    pub n_sites: usize,
    pub n_steps: i64,
    pub gates: Vec<Gate>,
}

impl CircuitSpacetime {
    pub fn empty(n_sites: usize, n_steps: i64) -> Self {
        CircuitSpacetime { n_sites, n_steps, gates: vec![] }
    }

    /// Brickwork of Haar-random two-site gates; layer `t` pairs `(i, i+1)`
    /// with `i ≡ t (mod 2)`.
    pub fn brickwork<R: Rng + ?Sized>(n_sites: usize, n_steps: i64, rng: &mut R) -> Self {
        let mut gates = vec![];
        for t in 0..n_steps {
            let mut i = (t % 2) as usize;
            while i + 1 < n_sites {
                gates.push(Gate { step: t, site: i, unitary: linalg::random_unitary(rng, 4) });
                i += 2;
            }
        }
        CircuitSpacetime { n_sites, n_steps, gates }
    }

    pub fn validate(&self) -> Result<(), FvError> {
        if self.n_sites == 0 || self.n_steps < 0 {
            return Err(FvError::InvalidCircuit("need at least one site and a non-negative step count".into()));
        }
        let mut used = BTreeSet::new();
        for g in &self.gates {
            if g.site + 1 >= self.n_sites || g.step < 0 || g.step >= self.n_steps {
                return Err(FvError::InvalidCircuit(format!("gate at step {} site {} outside the window", g.step, g.site)));
            }
            if g.unitary.nrows() != 4 || linalg::unitarity_defect(&g.unitary) > qops::tolerances().operator {
                return Err(FvError::InvalidCircuit(format!("gate at step {} site {} is not a two-qubit unitary", g.step, g.site)));
            }
            if !used.insert((g.step, g.site)) || !used.insert((g.step, g.site + 1)) {
                return Err(FvError::InvalidCircuit(format!("overlapping gates in layer {}", g.step)));
            }
        }
        Ok(())
    }
}

/// Pointlike probe qubit at `site`, coupled by two-qubit gates on
/// (system site, probe) at the listed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCoupling {
    pub label: String,
    pub site: usize,
    pub region: Region,
    pub gates: Vec<(i64, CMat)>,
    pub sigma: CMat,
    pub free: CMat,
}

impl ProbeCoupling {
    pub fn new(label: &str, site: usize, steps: &[i64], gates: Vec<CMat>, sigma: CMat) -> Result<Self, FvError> {
        let region = Region::cells(label, steps.iter().map(|&t| (t, site as i64))).map_err(|e| FvError::InvalidCircuit(e.to_string()))?;
        Ok(ProbeCoupling { label: label.into(), site, region, gates: steps.iter().copied().zip(gates).collect(), sigma, free: linalg::identity(2) })
    }

    pub fn cells(&self) -> Vec<Cell> {
        self.gates.iter().map(|g| (g.0, self.site as i64)).collect()
    }
}

/// Dense action of `X = S† (·) S`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatteringMap {
    pub space: ProductSpace,
    pub s: CMat,
}

impl ScatteringMap {
    pub fn apply(&self, x: &CMat) -> CMat {
        self.s.adjoint() * x * &self.s
    }

    /// Largest of `‖Θ(1) − 1‖`, `‖Θ(XY) − Θ(X)Θ(Y)‖`, `‖Θ(X†) − Θ(X)†‖`
    /// over random operator pairs.
    pub fn isomorphism_defect<R: Rng + ?Sized>(&self, rng: &mut R, pairs: usize) -> f64 {
        let n = self.space.dim();
        let mut d = linalg::max_abs(&(self.apply(&linalg::identity(n)) - linalg::identity(n)));
        for _ in 0..pairs {
            let x = linalg::random_hermitian(rng, n) + linalg::random_hermitian(rng, n) * linalg::I;
            let y = linalg::random_hermitian(rng, n);
            d = d.max(linalg::max_abs(&(self.apply(&(&x * &y)) - self.apply(&x) * self.apply(&y))));
            d = d.max(linalg::max_abs(&(self.apply(&x.adjoint()) - self.apply(&x).adjoint())));
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FvSystem {
    pub circuit: CircuitSpacetime,
    pub probes: Vec<ProbeCoupling>,
    pub space: ProductSpace,
}

impl FvSystem {
    pub fn new(circuit: CircuitSpacetime, probes: Vec<ProbeCoupling>) -> Result<Self, FvError> {
        circuit.validate()?;
        for p in &probes {
            if p.site >= circuit.n_sites {
                return Err(FvError::InvalidCircuit(format!("probe `{}` sits outside the chain", p.label)));
            }
            for (t, g) in &p.gates {
                if *t < 0 || *t >= circuit.n_steps.max(1) {
                    return Err(FvError::OutOfWindow { probe: p.label.clone(), step: *t });
                }
                let cell = (*t, p.site as i64);
                if !p.region.cell_set().is_some_and(|s| s.contains(&cell)) {
                    return Err(FvError::CouplingOutsideK { probe: p.label.clone(), cell });
                }
                if g.nrows() != 4 || linalg::unitarity_defect(g) > qops::tolerances().operator {
                    return Err(FvError::InvalidCircuit(format!("probe `{}` gate at step {t} is not unitary", p.label)));
                }
            }
            if linalg::unitarity_defect(&p.free) > qops::tolerances().operator {
                return Err(FvError::InvalidCircuit(format!("probe `{}` free evolution is not unitary", p.label)));
            }
        }
        let mut factors: Vec<(String, usize)> = (0..circuit.n_sites).map(|i| (format!("s{i}"), 2)).collect();
        factors.extend(probes.iter().map(|p| (p.label.clone(), 2)));
        let space = ProductSpace::new(&factors)?;
        for p in &probes {
            DensityState::new(&space.subspace(std::slice::from_ref(&p.label))?, p.sigma.clone())?;
        }
        Ok(FvSystem { circuit, probes, space })
    }

    pub fn system_labels(&self) -> Vec<String> {
        (0..self.circuit.n_sites).map(|i| format!("s{i}")).collect()
    }

    fn site(&self, i: usize) -> String {
        format!("s{i}")
    }

    fn layer(&self, t: i64) -> CMat {
        let mut m = linalg::identity(self.space.dim());
        for g in self.circuit.gates.iter().filter(|g| g.step == t) {
            m = qops::embed(&g.unitary, &[self.site(g.site), self.site(g.site + 1)], &self.space).expect("validated gate").matrix * m;
        }
        for p in &self.probes {
            m = qops::embed(&p.free, &[p.label.as_str()], &self.space).expect("probe factor").matrix * m;
        }
        m
    }

    fn couplings(&self, t: i64, coupled: &[bool]) -> CMat {
        let mut m = linalg::identity(self.space.dim());
        for (p, _) in self.probes.iter().zip(coupled).filter(|(_, &c)| c) {
            for (_, g) in p.gates.iter().filter(|g| g.0 == t) {
                m = qops::embed(g, &[self.site(p.site), p.label.clone()], &self.space).expect("validated gate").matrix * m;
            }
        }
        m
    }

    /// Uncoupled evolution through the first `t` steps.
    pub fn free_evolution(&self, t: i64) -> CMat {
        (0..t).fold(linalg::identity(self.space.dim()), |v, s| self.layer(s) * v)
    }

    /// Full-window evolution with the selected probes coupled.
    pub fn evolution(&self, coupled: &[bool]) -> CMat {
        (0..self.circuit.n_steps).fold(linalg::identity(self.space.dim()), |v, s| self.layer(s) * self.couplings(s, coupled) * v)
    }

    pub fn scattering_map(&self, coupled: &[bool]) -> ScatteringMap {
        let v = self.evolution(coupled);
        let v0 = self.evolution(&vec![false; self.probes.len()]);
        ScatteringMap { space: self.space.clone(), s: v0.adjoint() * v }
    }

    pub fn all_coupled(&self) -> Vec<bool> {
        vec![true; self.probes.len()]
    }

    pub fn only(&self, i: usize) -> Vec<bool> {
        (0..self.probes.len()).map(|k| k == i).collect()
    }

    /// `X_(t, x)` for a single-site operator.
    pub fn cell_operator(&self, cell: Cell, x: &CMat) -> CMat {
        let v0 = self.free_evolution(cell.0);
        let local = qops::embed(x, &[self.site(cell.1 as usize)], &self.space).expect("site factor").matrix;
        v0.adjoint() * local * v0
    }

    /// Product of cell operators, earliest leftmost.
    pub fn region_operator(&self, parts: &[(Cell, CMat)]) -> CMat {
        parts.iter().fold(linalg::identity(self.space.dim()), |acc, (c, x)| acc * self.cell_operator(*c, x))
    }

    fn probe_states(&self) -> Vec<CMat> {
        self.probes.iter().map(|p| p.sigma.clone()).collect()
    }

    /// `ω ⊗ σ_1 ⊗ …` on the full space.
    pub fn joint_state(&self, omega: &CMat) -> CMat {
        let mut parts = vec![omega.clone()];
        parts.extend(self.probe_states());
        linalg::kron_all(&parts)
    }

    pub fn probe_index(&self, label: &str) -> Option<usize> {
        self.probes.iter().position(|p| p.label == label)
    }
}

fn check_effect(b: &CMat) -> Result<(), FvError> {
    let tol = qops::tolerances().effect;
    if linalg::hermiticity_defect(b) > tol {
        return Err(FvError::NotEffect);
    }
    let (ev, _) = linalg::eigh(b);
    if ev.iter().any(|&v| v < -tol || v > 1.0 + tol) {
        return Err(FvError::NotEffect);
    }
    Ok(())
}

fn sqrt_psd(b: &CMat) -> CMat {
    let (ev, v) = linalg::eigh(b);
    let d = CMat::from_diagonal(&nalgebra::DVector::from_iterator(ev.len(), ev.iter().map(|&x| cr(x.max(0.0).sqrt()))));
    &v * d * v.adjoint()
}

/// `ε_σ(B) = tr_P((1 ⊗ σ) Θ(1 ⊗ B))` for an effect of probe `p`, all
/// probes contracted with their preparations.
pub fn induced_observable(sys: &FvSystem, theta: &ScatteringMap, p: usize, b: &CMat) -> Result<CMat, FvError> {
    check_effect(b)?;
    let lifted = qops::embed(b, &[sys.probes[p].label.as_str()], &sys.space)?.matrix;
    let image = theta.apply(&lifted);
    let mut parts = vec![linalg::identity(1 << sys.circuit.n_sites)];
    parts.extend(sys.probe_states());
    let weighted = linalg::kron_all(&parts) * image;
    Ok(qops::partial_trace_matrix(&sys.space, &weighted, &sys.system_labels())?)
}

/// `ω' = tr_P(S (ω ⊗ σ) S†)`.
pub fn update_nonselective(sys: &FvSystem, theta: &ScatteringMap, omega: &DensityState) -> Result<DensityState, FvError> {
    let joint = &theta.s * sys.joint_state(&omega.matrix) * theta.s.adjoint();
    let m = qops::partial_trace_matrix(&sys.space, &joint, &sys.system_labels())?;
    Ok(DensityState::new(&omega.space, linalg::hermitian_part(&m))?)
}

/// State-form selective update for joint probe effects `(probe, B)`.
pub fn update_selective(sys: &FvSystem, theta: &ScatteringMap, omega: &DensityState, effects: &[(usize, CMat)]) -> Result<(DensityState, f64), FvError> {
    let n = sys.space.dim();
    let mut root = linalg::identity(n);
    for (p, b) in effects {
        check_effect(b)?;
        root = qops::embed(&sqrt_psd(b), &[sys.probes[*p].label.as_str()], &sys.space)?.matrix * root;
    }
    let joint = &theta.s * sys.joint_state(&omega.matrix) * theta.s.adjoint();
    let filtered = &root * joint * root.adjoint();
    let m = qops::partial_trace_matrix(&sys.space, &filtered, &sys.system_labels())?;
    let prob = m.trace().re;
    if prob <= qops::tolerances().min_probability {
        return Err(QopsError::ZeroProbability { p: prob }.into());
    }
    Ok((DensityState::new(&omega.space, linalg::hermitian_part(&(m / cr(prob))))?, prob))
}

fn orderable(k1: &[Cell], k2: &[Cell]) -> bool {
    !k2.iter().any(|&b| k1.iter().any(|&a| in_past(b, a) && b != a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corollary6Report {
    /// Trace norm of `ω''_12 − ω'_12`.
    pub residual: f64,
    /// `‖S_12 − S_2 S_1‖`.
    pub factorization_residual: f64,
    /// Trace norm of `ω''_12 − ω''_21` when the regions are spacelike.
    pub order_residual: Option<f64>,
    pub probability: f64,
}

/// Successive selective updates with probes 0 then 1 against the joint
/// update conditioned on `B1 ⊗ B2`.
pub fn corollary6_check(sys: &FvSystem, omega: &DensityState, b1: &CMat, b2: &CMat) -> Result<Corollary6Report, FvError> {
    let (k1, k2) = (sys.probes[0].cells(), sys.probes[1].cells());
    if !orderable(&k1, &k2) {
        return Err(FvError::NotCausallyOrderable);
    }
    let (t1, t2, t12) = (sys.scattering_map(&sys.only(0)), sys.scattering_map(&sys.only(1)), sys.scattering_map(&sys.all_coupled()));
    let (w1, _) = update_selective(sys, &t1, omega, &[(0, b1.clone())])?;
    let (w12s, _) = update_selective(sys, &t2, &w1, &[(1, b2.clone())])?;
    let (w12, p) = update_selective(sys, &t12, omega, &[(0, b1.clone()), (1, b2.clone())])?;
    let residual = linalg::trace_norm(&(&w12s.matrix - &w12.matrix));
    let factorization_residual = linalg::op_norm(&(&t12.s - &t2.s * &t1.s));
    let spacelike = k1.iter().all(|&a| k2.iter().all(|&b| !related(a, b)));
    let order_residual = if spacelike {
        let (w2, _) = update_selective(sys, &t2, omega, &[(1, b2.clone())])?;
        let (w21, _) = update_selective(sys, &t1, &w2, &[(0, b1.clone())])?;
        Some(linalg::trace_norm(&(&w12s.matrix - &w21.matrix)))
    } else {
        None
    };
    Ok(Corollary6Report { residual, factorization_residual, order_residual, probability: p })
}

/// Cells `Θ_2(C)` depends on: O3 together with every probe-2 cell that
/// fails to commute with what is already collected, scanning latest first.
pub fn dependency_closure(k2: &[Cell], o3: &[Cell]) -> Vec<Cell> {
    let mut dep: Vec<Cell> = o3.to_vec();
    let mut k: Vec<Cell> = k2.to_vec();
    k.sort_by_key(|c| std::cmp::Reverse(c.0));
    let mut probe_in = false;
    for c in k {
        // Gates of one pointlike probe share its qubit.
        if probe_in || dep.iter().any(|&d| related(c, d)) {
            dep.push(c);
            probe_in = true;
        }
    }
    dep
}

/// Circuit-cone form of the Bostelmann geometry for probes 0 (K1) and
/// 1 (K2) and observable cells O3.
pub fn bostelmann_geometry(sys: &FvSystem, o3: &[Cell]) -> Result<Vec<Cell>, FvError> {
    let (k1, k2) = (sys.probes[0].cells(), sys.probes[1].cells());
    if !orderable(&k1, &k2) {
        return Err(FvError::NotCausallyOrderable);
    }
    for &a in &k1 {
        for &o in o3 {
            if in_past(a, o) {
                return Err(FvError::GeometryViolation(format!("K1 cell {a:?} lies in the causal past of O3 cell {o:?}")));
            }
            if related(a, o) {
                return Err(FvError::GeometryViolation(format!("K1 cell {a:?} lies in the causal future of O3 cell {o:?}")));
            }
        }
    }
    for &o in o3 {
        if let Some(b) = k2.iter().find(|&&b| in_past(o, b) && o != b) {
            return Err(FvError::GeometryViolation(format!("O3 cell {o:?} lies in the causal past of K2 cell {b:?}")));
        }
    }
    let dep = dependency_closure(&k2, o3);
    for &d in &dep {
        if let Some(a) = k1.iter().find(|&&a| related(a, d)) {
            return Err(FvError::GeometryViolation(format!("cell {d:?} that Θ2(C) depends on is causally related to K1 cell {a:?}")));
        }
    }
    Ok(dep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BostelmannReport {
    /// `‖Θ1(Θ2(C)) − Θ2(C)‖`.
    pub residual: f64,
    pub dependency: Vec<Cell>,
    pub geometry_ok: bool,
}

/// Residual of `(Θ1 ∘ Θ2)(C ⊗ 1 ⊗ 1) = Θ2(C ⊗ 1 ⊗ 1)`. With `enforce`
/// the geometry is checked first; otherwise it is only recorded.
pub fn bostelmann_check(sys: &FvSystem, c: &[(Cell, CMat)], enforce: bool) -> Result<BostelmannReport, FvError> {
    let o3: Vec<Cell> = c.iter().map(|p| p.0).collect();
    let geo = bostelmann_geometry(sys, &o3);
    let (geometry_ok, dependency) = match geo {
        Ok(d) => (true, d),
        Err(e) if enforce => return Err(e),
        Err(_) => (false, vec![]),
    };
    let cop = sys.region_operator(c);
    let t1 = sys.scattering_map(&sys.only(0));
    let t2 = sys.scattering_map(&sys.only(1));
    let inner = t2.apply(&cop);
    let residual = linalg::op_norm(&(t1.apply(&inner) - &inner));
    Ok(BostelmannReport { residual, dependency, geometry_ok })
}

/// Largest spread of `(ω ⊗ σ)(Θ_12(C))` over the given replacements of
/// probe 0's gates (an empty list means probe 0 uncoupled).
pub fn bostelmann_state_spread(sys: &FvSystem, c: &[(Cell, CMat)], omega: &CMat, variants: &[Vec<(i64, CMat)>]) -> Result<f64, FvError> {
    let cop = sys.region_operator(c);
    let rho = sys.joint_state(omega);
    let value = |s: &FvSystem| qops::trace_product(&rho, &s.scattering_map(&s.all_coupled()).apply(&cop)).re;
    let mut off = sys.clone();
    off.probes[0].gates.clear();
    let base = value(&off);
    let mut spread = 0.0f64;
    for v in variants {
        let mut alt = sys.clone();
        alt.probes[0].gates = v.clone();
        alt = FvSystem::new(alt.circuit, alt.probes)?;
        spread = spread.max((value(&alt) - base).abs());
    }
    Ok(spread)
}

/// Factors on which `m` acts non-trivially: `m` is trivial on `f` iff
/// `‖m − (tr_f m / d_f) ⊗ 1_f‖ < tol`.
pub fn support_scan(space: &ProductSpace, m: &CMat, tol: f64) -> Result<Vec<String>, FvError> {
    let mut out = vec![];
    for (label, d) in space.factors() {
        let keep: Vec<String> = space.labels().into_iter().filter(|l| l != label).collect();
        let reduced = qops::partial_trace_matrix(space, m, &keep)? / cr(*d as f64);
        let back = qops::embed(&reduced, &keep, space)?.matrix;
        if linalg::max_abs(&(&back - m)) >= tol {
            out.push(label.clone());
        }
    }
    Ok(out)
}

/// Single system qubit and one probe, coupled by a CNOT controlled on the
/// system at cell `(0, 0)`; probe prepared in `|0>`.
pub fn controlled_gate() -> FvSystem {
    let cnot = linalg::from_real(4, 4, &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0.]);
    let p = ProbeCoupling::new("p", 0, &[0], vec![cnot], linalg::ket_bra(&linalg::basis_vec(2, 0))).expect("valid probe");
    FvSystem::new(CircuitSpacetime::empty(1, 1), vec![p]).expect("valid preset")
}

/// Four sites, three brickwork steps, probes at sites 0 (K1) and 2 (K2).
/// Valid: K1 = {(0, 0)}, K2 = {(1, 2), (2, 2)}, O3 = {(2, 3)}. The later K2
/// cell lies in the future of K1, the earlier one in the past of O3.
/// Broken: K1 = {(0, 3)}, in the past of O3.
pub fn bostelmann<R: Rng + ?Sized>(valid: bool, rng: &mut R) -> (FvSystem, Vec<(Cell, CMat)>) {
    let circuit = CircuitSpacetime::brickwork(4, 3, rng);
    let plus = (linalg::identity(2) + linalg::pauli_x()) * cr(0.5);
    let (site1, k1) = if valid { (0, vec![0]) } else { (3, vec![0]) };
    let g1: Vec<CMat> = k1.iter().map(|_| linalg::random_unitary(rng, 4)).collect();
    let p1 = ProbeCoupling::new("p1", site1, &k1, g1, plus.clone()).expect("valid probe");
    let g2: Vec<CMat> = (0..2).map(|_| linalg::random_unitary(rng, 4)).collect();
    let p2 = ProbeCoupling::new("p2", 2, &[1, 2], g2, plus).expect("valid probe");
    let sys = FvSystem::new(circuit, vec![p1, p2]).expect("valid preset");
    (sys, vec![((2, 3), linalg::pauli_z())])
}

/// Random brickwork on `n_sites` with two probes whose coupling cells are
/// causally orderable (no K2 cell in the past of a K1 cell).
pub fn random_orderable<R: Rng + ?Sized>(n_sites: usize, n_steps: i64, rng: &mut R) -> FvSystem {
    loop {
        let circuit = CircuitSpacetime::brickwork(n_sites, n_steps, rng);
        let mut probes = vec![];
        for label in ["p1", "p2"] {
            let site = rng.gen_range(0..n_sites);
            let mut steps: Vec<i64> = (0..n_steps).filter(|_| rng.gen_bool(0.5)).collect();
            if steps.is_empty() {
                steps.push(rng.gen_range(0..n_steps));
            }
            let gates = steps.iter().map(|_| linalg::random_unitary(rng, 4)).collect();
            let sigma = linalg::random_density(rng, 2);
            probes.push(ProbeCoupling::new(label, site, &steps, gates, sigma).expect("valid probe"));
        }
        if orderable(&probes[0].cells(), &probes[1].cells()) {
            return FvSystem::new(circuit, probes).expect("valid instance");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ket(i: usize) -> CMat {
        linalg::ket_bra(&linalg::basis_vec(2, i))
    }

    #[test]
    fn no_coupling_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = CircuitSpacetime::brickwork(3, 3, &mut rng);
        let mut p = ProbeCoupling::new("p", 1, &[0], vec![linalg::identity(4)], ket(0)).unwrap();
        p.gates.clear();
        let sys = FvSystem::new(c, vec![p]).unwrap();
        let t = sys.scattering_map(&sys.all_coupled());
        assert!(linalg::max_abs(&(&t.s - linalg::identity(16))) < 1e-12);
        let omega = DensityState::new(&sys.space.subspace(&sys.system_labels()).unwrap(), linalg::random_density(&mut rng, 8)).unwrap();
        let w = update_nonselective(&sys, &t, &omega).unwrap();
        assert!(linalg::max_abs(&(w.matrix - &omega.matrix)) < 1e-12);
        let b = (ket(1) * cr(0.7)).clone();
        let e = induced_observable(&sys, &t, 0, &b).unwrap();
        assert!(linalg::max_abs(&(e - linalg::identity(8) * cr(0.0))) < 1e-12);
        let e1 = induced_observable(&sys, &t, 0, &linalg::identity(2)).unwrap();
        assert!(linalg::max_abs(&(e1 - linalg::identity(8))) < 1e-12);
    }

    #[test]
    fn theta_is_star_isomorphism() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sys = random_orderable(3, 3, &mut rng);
        let t = sys.scattering_map(&sys.all_coupled());
        assert!(t.isomorphism_defect(&mut rng, 100) < 1e-10);
        assert!(linalg::unitarity_defect(&t.s) < 1e-12);
    }

    #[test]
    fn controlled_gate_examples() {
        let sys = controlled_gate();
        let t = sys.scattering_map(&sys.all_coupled());
        let e = induced_observable(&sys, &t, 0, &ket(1)).unwrap();
        assert!(linalg::max_abs(&(e - ket(1))) < 1e-14);
        let sub = sys.space.subspace(&sys.system_labels()).unwrap();
        let plus = (linalg::identity(2) + linalg::pauli_x()) * cr(0.5);
        let w = update_nonselective(&sys, &t, &DensityState::new(&sub, plus.clone()).unwrap()).unwrap();
        assert!(linalg::max_abs(&(w.matrix - linalg::identity(2) * cr(0.5))) < 1e-14);
        let (ws, p) = update_selective(&sys, &t, &DensityState::new(&sub, plus.clone()).unwrap(), &[(0, ket(1))]).unwrap();
        assert!((p - 0.5).abs() < 1e-14 && linalg::max_abs(&(ws.matrix - ket(1))) < 1e-14);
        assert!(matches!(induced_observable(&sys, &t, 0, &(ket(1) * cr(2.0))), Err(FvError::NotEffect)));
    }

    #[test]
    fn selective_with_unit_effect_is_nonselective() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sys = random_orderable(3, 3, &mut rng);
        let t = sys.scattering_map(&sys.all_coupled());
        let sub = sys.space.subspace(&sys.system_labels()).unwrap();
        let omega = DensityState::new(&sub, linalg::random_density(&mut rng, 8)).unwrap();
        let ns = update_nonselective(&sys, &t, &omega).unwrap();
        let (s, p) = update_selective(&sys, &t, &omega, &[(0, linalg::identity(2))]).unwrap();
        assert!((p - 1.0).abs() < 1e-12 && linalg::max_abs(&(s.matrix - ns.matrix)) < 1e-12);
    }

    #[test]
    fn coupling_outside_declared_region() {
        let mut p = ProbeCoupling::new("p", 0, &[0], vec![linalg::identity(4)], ket(0)).unwrap();
        p.region = Region::cells("K", [(1, 0)]).unwrap();
        assert!(matches!(FvSystem::new(CircuitSpacetime::empty(2, 2), vec![p]), Err(FvError::CouplingOutsideK { .. })));
        let p = ProbeCoupling::new("p", 0, &[5], vec![linalg::identity(4)], ket(0)).unwrap();
        assert!(matches!(FvSystem::new(CircuitSpacetime::empty(2, 2), vec![p]), Err(FvError::OutOfWindow { .. })));
    }

    #[test]
    fn property_one_spacelike_cells_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = CircuitSpacetime::brickwork(5, 4, &mut rng);
        let p = ProbeCoupling::new("p", 0, &[1, 2], vec![linalg::random_unitary(&mut rng, 4), linalg::random_unitary(&mut rng, 4)], ket(0)).unwrap();
        let sys = FvSystem::new(c, vec![p]).unwrap();
        let t = sys.scattering_map(&sys.all_coupled());
        let k = sys.probes[0].cells();
        let mut checked = 0;
        for step in 0..=4 {
            for x in 0..5 {
                let cell = (step, x);
                let x_op = sys.cell_operator(cell, &linalg::pauli_y());
                let d = linalg::max_abs(&(t.apply(&x_op) - &x_op));
                if k.iter().all(|&kc| !related(kc, cell)) {
                    assert!(d < 1e-12, "{cell:?}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 3);
        // A cell in the future of K is moved.
        let x_op = sys.cell_operator((3, 0), &linalg::pauli_z());
        assert!(linalg::max_abs(&(t.apply(&x_op) - &x_op)) > 1e-3);
    }

    #[test]
    fn nonselective_keeps_spacelike_expectations() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let c = CircuitSpacetime::brickwork(5, 3, &mut rng);
        let p = ProbeCoupling::new("p", 0, &[1], vec![linalg::random_unitary(&mut rng, 4)], ket(0)).unwrap();
        let sys = FvSystem::new(c, vec![p]).unwrap();
        let t = sys.scattering_map(&sys.all_coupled());
        let sub = sys.space.subspace(&sys.system_labels()).unwrap();
        let omega = DensityState::new(&sub, linalg::random_density(&mut rng, 32)).unwrap();
        let w = update_nonselective(&sys, &t, &omega).unwrap();
        let value = |m: &CMat, a: &CMat| qops::trace_product(&sys.joint_state(m), a).re;
        let spacelike = sys.cell_operator((1, 3), &linalg::pauli_x()) * sys.cell_operator((2, 4), &linalg::pauli_z());
        assert!((value(&w.matrix, &spacelike) - value(&omega.matrix, &spacelike)).abs() < 1e-12);
        let timelike = sys.cell_operator((3, 1), &linalg::pauli_z());
        assert!((value(&w.matrix, &timelike) - value(&omega.matrix, &timelike)).abs() > 1e-6);
    }

    #[test]
    fn property_two_support_within_dependency_cones() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = CircuitSpacetime::brickwork(5, 4, &mut rng);
        let p = ProbeCoupling::new("p", 1, &[0, 1], vec![linalg::random_unitary(&mut rng, 4), linalg::random_unitary(&mut rng, 4)], ket(0)).unwrap();
        let sys = FvSystem::new(c, vec![p]).unwrap();
        let t = sys.scattering_map(&sys.all_coupled());
        let cell = (3, 3);
        let img = t.apply(&sys.cell_operator(cell, &linalg::pauli_x()));
        let support = support_scan(&sys.space, &img, 1e-12).unwrap();
        // Predicted: time-zero cones of the cell and of the K cells it
        // depends on, plus the probe.
        let dep = dependency_closure(&sys.probes[0].cells(), &[cell]);
        let mut allowed: BTreeSet<String> = BTreeSet::new();
        for d in &dep {
            for y in (d.1 - d.0).max(0)..=(d.1 + d.0).min(4) {
                allowed.insert(format!("s{y}"));
            }
        }
        allowed.insert("p".into());
        assert!(support.iter().all(|s| allowed.contains(s)), "{support:?} vs {allowed:?}");
        assert!(support.contains(&"p".to_string()));
    }

    #[test]
    fn heisenberg_support_in_cone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sys = FvSystem::new(CircuitSpacetime::brickwork(5, 3, &mut rng), vec![]).unwrap();
        for t in 0..=3i64 {
            let op = sys.cell_operator((t, 2), &linalg::pauli_x());
            for s in support_scan(&sys.space, &op, 1e-12).unwrap() {
                let y: i64 = s[1..].parse().unwrap();
                assert!((y - 2).abs() <= t, "t {t} site {y}");
            }
        }
    }

    #[test]
    fn selective_entangled_vs_product() {
        // Probe CNOT on site 0; site 1 is never coupled and there are no
        // layers, so site 1 is in the causal complement of K.
        let cnot = linalg::from_real(4, 4, &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0.]);
        let p = ProbeCoupling::new("p", 0, &[0], vec![cnot], ket(0)).unwrap();
        let sys = FvSystem::new(CircuitSpacetime::empty(2, 1), vec![p]).unwrap();
        let t = sys.scattering_map(&sys.all_coupled());
        let sub = sys.space.subspace(&sys.system_labels()).unwrap();
        let zb = linalg::kron(&linalg::identity(2), &linalg::pauli_z());
        let bell = linalg::CVec::from_vec(vec![cr(0.5f64.sqrt()), cr(0.0), cr(0.0), cr(0.5f64.sqrt())]);
        let omega = DensityState::pure(&sub, &bell).unwrap();
        let (ws, _) = update_selective(&sys, &t, &omega, &[(0, ket(1))]).unwrap();
        assert!((qops::trace_product(&ws.matrix, &zb).re + 1.0).abs() < 1e-12);
        let ns = update_nonselective(&sys, &t, &omega).unwrap();
        assert!(qops::trace_product(&ns.matrix, &zb).norm() < 1e-12);
        let prod = DensityState::new(&sub, linalg::kron(&((linalg::identity(2) + linalg::pauli_x()) * cr(0.5)), &ket(0))).unwrap();
        let (ws, _) = update_selective(&sys, &t, &prod, &[(0, ket(1))]).unwrap();
        assert!((qops::trace_product(&ws.matrix, &zb).re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corollary6_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let sys = random_orderable(3, 3, &mut rng);
            let sub = sys.space.subspace(&sys.system_labels()).unwrap();
            let omega = DensityState::new(&sub, linalg::random_density(&mut rng, 8)).unwrap();
            let b1 = ket(0) * cr(0.8) + ket(1) * cr(0.3);
            let b2 = ket(1);
            let r = corollary6_check(&sys, &omega, &b1, &b2).unwrap();
            assert!(r.residual < 1e-10 && r.factorization_residual < 1e-10, "{r:?}");
            if let Some(o) = r.order_residual {
                assert!(o < 1e-10);
            }
        }
    }

    #[test]
    fn corollary6_uncoupled_second_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut sys = random_orderable(3, 2, &mut rng);
        sys.probes[1].gates.clear();
        let sub = sys.space.subspace(&sys.system_labels()).unwrap();
        let omega = DensityState::new(&sub, linalg::random_density(&mut rng, 8)).unwrap();
        let r = corollary6_check(&sys, &omega, &ket(0), &linalg::identity(2)).unwrap();
        assert!(r.residual < 1e-12);
    }

    #[test]
    fn corollary6_rejects_unorderable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = CircuitSpacetime::brickwork(3, 3, &mut rng);
        let p1 = ProbeCoupling::new("p1", 0, &[2], vec![linalg::random_unitary(&mut rng, 4)], ket(0)).unwrap();
        let p2 = ProbeCoupling::new("p2", 1, &[0], vec![linalg::random_unitary(&mut rng, 4)], ket(0)).unwrap();
        let sys = FvSystem::new(c, vec![p1, p2]).unwrap();
        let sub = sys.space.subspace(&sys.system_labels()).unwrap();
        let omega = DensityState::maximally_mixed(&sub);
        assert!(matches!(corollary6_check(&sys, &omega, &ket(0), &ket(0)), Err(FvError::NotCausallyOrderable)));
    }

    #[test]
    fn bostelmann_valid_and_broken() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..3 {
            let (sys, c) = bostelmann(true, &mut rng);
            let r = bostelmann_check(&sys, &c, true).unwrap();
            assert!(r.residual < 1e-10, "{r:?}");
            assert!(r.dependency.contains(&(1, 2)) && !r.dependency.contains(&(2, 2)));
        }
        let (sys, c) = bostelmann(false, &mut rng);
        assert!(matches!(bostelmann_check(&sys, &c, true), Err(FvError::GeometryViolation(_))));
        let r = bostelmann_check(&sys, &c, false).unwrap();
        assert!(!r.geometry_ok && r.residual > 1e-3, "{r:?}");
    }

    #[test]
    fn bostelmann_probe_one_uncoupled_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut sys, c) = bostelmann(true, &mut rng);
        sys.probes[0].gates.clear();
        assert!(bostelmann_check(&sys, &c, true).unwrap().residual < 1e-14);
    }

    #[test]
    fn bostelmann_state_level_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (sys, c) = bostelmann(true, &mut rng);
        let omega = linalg::random_density(&mut rng, 16);
        // Probe-1 variants plus a pure system kick (identity on the probe).
        let mut variants: Vec<Vec<(i64, CMat)>> = (0..4).map(|_| vec![(0, linalg::random_unitary(&mut rng, 4))]).collect();
        variants.push(vec![(0, linalg::kron(&linalg::random_unitary(&mut rng, 2), &linalg::identity(2)))]);
        assert!(bostelmann_state_spread(&sys, &c, &omega, &variants).unwrap() < 1e-10);
        let (bad, c) = bostelmann(false, &mut rng);
        let variants: Vec<Vec<(i64, CMat)>> = (0..3).map(|_| vec![(0, linalg::random_unitary(&mut rng, 4))]).collect();
        assert!(bostelmann_state_spread(&bad, &c, &omega, &variants).unwrap() > 1e-6);
    }

    #[test]
    fn induced_observables_are_effects() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sys = random_orderable(3, 3, &mut rng);
        let t = sys.scattering_map(&sys.all_coupled());
        for _ in 0..5 {
            let u = linalg::random_unitary(&mut rng, 2);
            let d = CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![cr(rng.gen()), cr(rng.gen())]));
            let b = &u * d * u.adjoint();
            let e = induced_observable(&sys, &t, 1, &b).unwrap();
            check_effect(&e).unwrap();
        }
    }
}
