//! Consistent-histories calculus on finite-dimensional systems.
//!
//! Class operators are stored in application order, earliest projector
//! rightmost: `C_α = P_{α_n}(t_n) … P_{α_1}(t_1)`, so `C_α |ψ⟩` applies the
//! first proposition first. Probabilities are `tr(C ρ C†)` and the
//! decoherence functional is `d(α, β) = tr(C_α ρ C_β†)`. The
//! leftmost-earliest product is available through [`leftmost_class_operator`],
//! which is `C_α†`; with it the same quantities read `tr(C† ρ C)`.

use crate::causal::{self, CausalError, Region};
use crate::linalg::{self, CMat, C64};
use crate::qops::{self, LocalOperator, ProductSpace, ProjectiveResolution, QopsError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HistoriesError {
    #[error("invalid projector: {0}")]
    InvalidProjector(String),
    #[error("invalid history family: {0}")]
    InvalidFamily(String),
    #[error("histories are not exclusive")]
    NotExclusive,
    #[error("O1 and O3 projectors do not commute (defect {defect:e})")]
    CommutationPrecondition { defect: f64 },
    #[error(transparent)]
    Causal(#[from] CausalError),
    #[error(transparent)]
    Qops(#[from] QopsError),
}

#[derive(Debug, Clone)]
pub struct HistoryStep {
    pub label: String,
    pub time: f64,
    /// Heisenberg-picture projector.
    pub projector: LocalOperator,
}

#[derive(Debug, Clone)]
pub struct History {
    pub steps: Vec<HistoryStep>,
}

fn check_projector(p: &CMat, what: &str) -> Result<(), HistoriesError> {
    let tol = qops::tolerances().projector;
    if linalg::hermiticity_defect(p) > tol || linalg::max_abs(&(p * p - p)) > tol {
        return Err(HistoriesError::InvalidProjector(what.into()));
    }
    Ok(())
}

impl History {
    pub fn new(steps: Vec<HistoryStep>) -> Result<Self, HistoriesError> {
        let h = History { steps };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<(), HistoriesError> {
        let first = self.steps.first().ok_or_else(|| HistoriesError::InvalidFamily("empty history".into()))?;
        for (i, s) in self.steps.iter().enumerate() {
            if s.projector.space != first.projector.space {
                return Err(QopsError::SpaceMismatch.into());
            }
            check_projector(&s.projector.matrix, &format!("step {i} (`{}`)", s.label))?;
            if i > 0 && s.time < self.steps[i - 1].time {
                return Err(HistoriesError::InvalidFamily(format!("step `{}` is earlier than its predecessor", s.label)));
            }
        }
        Ok(())
    }

    pub fn space(&self) -> &ProductSpace {
        &self.steps[0].projector.space
    }

    /// Exclusive iff orthogonal at some step.
    pub fn exclusive_with(&self, other: &History) -> bool {
        let tol = qops::tolerances().projector;
        self.steps.len() == other.steps.len()
            && self.steps.iter().zip(&other.steps).any(|(a, b)| linalg::max_abs(&(&a.projector.matrix * &b.projector.matrix)) < tol)
    }
}

/// `C_α = P_n … P_1`.
pub fn class_operator(h: &History) -> Result<LocalOperator, HistoriesError> {
    h.validate()?;
    let m = h.steps.iter().fold(linalg::identity(h.space().dim()), |acc, s| &s.projector.matrix * acc);
    Ok(LocalOperator::new(h.space(), m)?)
}

/// `P_1 … P_n`, the leftmost-earliest product (equal to `C_α†`).
pub fn leftmost_class_operator(h: &History) -> Result<CMat, HistoriesError> {
    Ok(class_operator(h)?.matrix.adjoint())
}

/// `p(α) = tr(C_α ρ C_α†)`.
pub fn probability(h: &History, rho: &CMat) -> Result<f64, HistoriesError> {
    let c = class_operator(h)?.matrix;
    Ok(qops::trace_product(&(&c * rho), &c.adjoint()).re)
}

/// `d(α, β) = tr(C_α ρ C_β†)`.
pub fn decoherence_pair(a: &History, b: &History, rho: &CMat) -> Result<C64, HistoriesError> {
    let (ca, cb) = (class_operator(a)?.matrix, class_operator(b)?.matrix);
    Ok(qops::trace_product(&(&ca * rho), &cb.adjoint()))
}

/// `α ∨ β` for histories differing at exactly one step, where their
/// projectors are orthogonal.
pub fn join(a: &History, b: &History) -> Result<History, HistoriesError> {
    if a.steps.len() != b.steps.len() {
        return Err(HistoriesError::NotExclusive);
    }
    let tol = qops::tolerances().projector;
    let differing: Vec<usize> = (0..a.steps.len()).filter(|&i| linalg::max_abs(&(&a.steps[i].projector.matrix - &b.steps[i].projector.matrix)) > tol).collect();
    let [i] = differing[..] else {
        return Err(HistoriesError::NotExclusive);
    };
    if linalg::max_abs(&(&a.steps[i].projector.matrix * &b.steps[i].projector.matrix)) > tol {
        return Err(HistoriesError::NotExclusive);
    }
    let mut out = a.clone();
    out.steps[i].projector.matrix = &a.steps[i].projector.matrix + &b.steps[i].projector.matrix;
    out.steps[i].label = format!("{}|{}", a.steps[i].label, b.steps[i].label);
    out.validate()?;
    Ok(out)
}

/// `p(α ∨ β) − p(α) − p(β)`; equals `2 Re d(α, β)`.
pub fn additivity_violation(a: &History, b: &History, rho: &CMat) -> Result<f64, HistoriesError> {
    let j = join(a, b)?;
    Ok(probability(&j, rho)? - probability(a, rho)? - probability(b, rho)?)
}

#[derive(Debug, Clone)]
pub struct FamilyStep {
    pub label: String,
    pub time: f64,
    /// Heisenberg-picture projectors.
    pub resolution: ProjectiveResolution,
}

#[derive(Debug, Clone)]
pub struct HistoryFamily {
    pub steps: Vec<FamilyStep>,
}

impl HistoryFamily {
    pub fn new(steps: Vec<FamilyStep>) -> Result<Self, HistoriesError> {
        let first = steps.first().ok_or_else(|| HistoriesError::InvalidFamily("no steps".into()))?;
        let space = first.resolution.space().clone();
        for (i, s) in steps.iter().enumerate() {
            s.resolution.validate()?;
            if s.resolution.space() != &space {
                return Err(QopsError::SpaceMismatch.into());
            }
            if i > 0 && s.time < steps[i - 1].time {
                return Err(HistoriesError::InvalidFamily(format!("step `{}` is earlier than its predecessor", s.label)));
            }
        }
        Ok(HistoryFamily { steps })
    }

    /// Schrödinger-picture resolutions at times `t_i`, moved to the
    /// Heisenberg picture with `P(t) = e^{iHt} P e^{−iHt}`.
    pub fn with_dynamics(steps: Vec<(String, f64, ProjectiveResolution)>, hamiltonian: &CMat) -> Result<Self, HistoriesError> {
        let mut out = vec![];
        for (label, t, r) in steps {
            let u = linalg::exp_i_hermitian(hamiltonian, t);
            let projectors =
                r.projectors.iter().map(|p| LocalOperator { matrix: &u * &p.matrix * u.adjoint(), ..p.clone() }).collect();
            out.push(FamilyStep { label, time: t, resolution: ProjectiveResolution { projectors, ..r } });
        }
        HistoryFamily::new(out)
    }

    /// Region-labelled steps placed along a linear extension of their causal
    /// order; the position in the extension becomes the step time.
    pub fn from_regions(steps: Vec<(Region, ProjectiveResolution)>) -> Result<Self, HistoriesError> {
        let regions: Vec<Region> = steps.iter().map(|s| s.0.clone()).collect();
        let order = causal::build_order(&regions)?;
        let seq = order.linear_extension();
        let out = seq
            .iter()
            .enumerate()
            .map(|(pos, &i)| FamilyStep { label: steps[i].0.label.clone(), time: pos as f64, resolution: steps[i].1.clone() })
            .collect();
        HistoryFamily::new(out)
    }

    pub fn space(&self) -> &ProductSpace {
        self.steps[0].resolution.space()
    }

    /// Every index combination, first step slowest.
    pub fn indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for s in &self.steps {
            out = out.into_iter().flat_map(|h| (0..s.resolution.projectors.len()).map(move |k| [h.clone(), vec![k]].concat())).collect();
        }
        out
    }

    pub fn history(&self, idx: &[usize]) -> History {
        History {
            steps: self
                .steps
                .iter()
                .zip(idx)
                .map(|(s, &k)| HistoryStep { label: format!("{}={k}", s.label), time: s.time, projector: s.resolution.projectors[k].clone() })
                .collect(),
        }
    }

    fn class_matrix(&self, idx: &[usize]) -> CMat {
        self.steps.iter().zip(idx).fold(linalg::identity(self.space().dim()), |acc, (s, &k)| &s.resolution.projectors[k].matrix * acc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoherenceMatrix {
    pub histories: Vec<Vec<usize>>,
    pub d: CMat,
}

impl DecoherenceMatrix {
    pub fn hermiticity_defect(&self) -> f64 {
        linalg::hermiticity_defect(&self.d)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        (0..self.d.nrows()).map(|i| self.d[(i, i)].re).collect()
    }

    pub fn diagonal_sum(&self) -> f64 {
        self.probabilities().iter().sum()
    }

    /// `alpha,beta,re,im` rows.
    pub fn to_csv(&self) -> String {
        let name = |h: &[usize]| h.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("-");
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["alpha", "beta", "re", "im"]).expect("in-memory write");
        for (i, a) in self.histories.iter().enumerate() {
            for (j, b) in self.histories.iter().enumerate() {
                let z = self.d[(i, j)];
                w.write_record([name(a), name(b), crate::cli::fmt17(z.re), crate::cli::fmt17(z.im)]).expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }
}

pub fn decoherence(fam: &HistoryFamily, rho: &CMat) -> DecoherenceMatrix {
    let histories = fam.indices();
    let applied: Vec<CMat> = histories.par_iter().map(|h| fam.class_matrix(h) * rho).collect();
    let cs: Vec<CMat> = histories.par_iter().map(|h| fam.class_matrix(h).adjoint()).collect();
    let n = histories.len();
    let entries: Vec<C64> = (0..n * n).into_par_iter().map(|k| qops::trace_product(&applied[k / n], &cs[k % n])).collect();
    DecoherenceMatrix { histories, d: CMat::from_row_slice(n, n, &entries) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyMode {
    /// `Re d(α, β) = 0`.
    Weak,
    /// `d(α, β) = 0`.
    Strong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyResult {
    pub pass: bool,
    pub max_violation: f64,
    /// `(α, β, violation)` for `α < β`.
    pub violations: Vec<(usize, usize, f64)>,
}

pub const CONSISTENCY_TOL: f64 = 1e-10;

pub fn consistency_check(fam: &HistoryFamily, rho: &CMat, mode: ConsistencyMode) -> ConsistencyResult {
    let dm = decoherence(fam, rho);
    let n = dm.histories.len();
    let mut violations = vec![];
    for i in 0..n {
        for j in (i + 1)..n {
            let z = dm.d[(i, j)];
            violations.push((i, j, if mode == ConsistencyMode::Weak { z.re.abs() } else { z.norm() }));
        }
    }
    let max_violation = violations.iter().map(|v| v.2).fold(0.0, f64::max);
    ConsistencyResult { pass: max_violation < CONSISTENCY_TOL, max_violation, violations }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BipartiteReport {
    /// `⟨P_{α'1} P_{α2} P_{α1}⟩` keyed by `(α'1, α1, α2)` with `α'1 ≠ α1`.
    pub consistency_terms: Vec<((usize, usize, usize), (f64, f64))>,
    pub max_consistency: f64,
    /// `|p(α2 | A1) − p(α2)|` per `α2`.
    pub marginal_shift: Vec<f64>,
    pub max_shift: f64,
    /// Consistency below `1e-12` implies a shift below `1e-10`.
    pub implication_holds: bool,
}

pub fn fuksa_bipartite(r1: &ProjectiveResolution, r2: &ProjectiveResolution, rho: &CMat) -> Result<BipartiteReport, HistoriesError> {
    r1.validate()?;
    r2.validate()?;
    let mut terms = vec![];
    let mut shifts = vec![];
    for (a2, p2) in r2.projectors.iter().enumerate() {
        let mut measured = 0.0;
        for (a1, p1) in r1.projectors.iter().enumerate() {
            let right = &p2.matrix * &p1.matrix * rho;
            measured += qops::trace_product(&right, &(&p1.matrix * &p2.matrix)).re;
            for (b1, q1) in r1.projectors.iter().enumerate().filter(|(b1, _)| *b1 != a1) {
                let z = qops::trace_product(&right, &q1.matrix);
                terms.push(((b1, a1, a2), (z.re, z.im)));
            }
        }
        shifts.push((measured - qops::trace_product(rho, &p2.matrix).re).abs());
    }
    let max_consistency = terms.iter().map(|t| t.1 .0.hypot(t.1 .1)).fold(0.0, f64::max);
    let max_shift = shifts.iter().copied().fold(0.0, f64::max);
    Ok(BipartiteReport { consistency_terms: terms, max_consistency, marginal_shift: shifts, max_shift, implication_holds: max_consistency >= 1e-12 || max_shift < 1e-10 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripartiteReport {
    /// Number of products `C†_{(α'1, …)} C_{(α1, …)}` with `α'1 ≠ α1`.
    pub conditions: usize,
    /// Largest operator norm among them.
    pub max_norm: f64,
    pub pass: bool,
}

fn check_commuting(r1: &ProjectiveResolution, r3: &ProjectiveResolution) -> Result<(), HistoriesError> {
    let mut defect = 0.0f64;
    for p in &r1.projectors {
        for q in &r3.projectors {
            defect = defect.max(linalg::max_abs(&linalg::commutator(&p.matrix, &q.matrix)));
        }
    }
    if defect > qops::tolerances().projector {
        return Err(HistoriesError::CommutationPrecondition { defect });
    }
    Ok(())
}

/// Operator-level signalling conditions for the chain `r1, middle…, r3`:
/// `C†_{(α'1, …)} C_{(α1, …)} = 0` for `α'1 ≠ α1` and every choice of the
/// later indices. One middle step gives the three-region set; more middle
/// steps give the extended sets.
pub fn fuksa_chain(r1: &ProjectiveResolution, middle: &[&ProjectiveResolution], r3: &ProjectiveResolution) -> Result<TripartiteReport, HistoriesError> {
    check_commuting(r1, r3)?;
    let mut later: Vec<&ProjectiveResolution> = middle.to_vec();
    later.push(r3);
    let mut steps = vec![FamilyStep { label: "O1".into(), time: 0.0, resolution: r1.clone() }];
    steps.extend(later.iter().enumerate().map(|(i, r)| FamilyStep { label: format!("O{}", i + 2), time: (i + 1) as f64, resolution: (*r).clone() }));
    let fam = HistoryFamily::new(steps)?;
    let tails: Vec<Vec<usize>> = HistoryFamily { steps: fam.steps[1..].to_vec() }.indices();
    let mut max_norm = 0.0f64;
    let mut conditions = 0;
    for tail in &tails {
        let cs: Vec<CMat> = (0..r1.projectors.len()).map(|a| fam.class_matrix(&[vec![a], tail.clone()].concat())).collect();
        for a in 0..cs.len() {
            for b in 0..cs.len() {
                if a != b {
                    max_norm = max_norm.max(linalg::op_norm(&(cs[b].adjoint() * &cs[a])));
                    conditions += 1;
                }
            }
        }
    }
    Ok(TripartiteReport { conditions, max_norm, pass: max_norm < CONSISTENCY_TOL })
}

pub fn fuksa_tripartite(r1: &ProjectiveResolution, r2: &ProjectiveResolution, r3: &ProjectiveResolution) -> Result<TripartiteReport, HistoriesError> {
    fuksa_chain(r1, &[r2], r3)
}

/// `O2'` squeezed between `O2` and `O3`.
pub fn fuksa_four_step(r1: &ProjectiveResolution, r2: &ProjectiveResolution, r2p: &ProjectiveResolution, r3: &ProjectiveResolution) -> Result<TripartiteReport, HistoriesError> {
    fuksa_chain(r1, &[r2, r2p], r3)
}

/// Joint distribution of the later steps, `p(α2, …, αn)`, optionally with a
/// non-selective measurement of `r1` first.
pub fn joint_statistics(r1: Option<&ProjectiveResolution>, later: &[&ProjectiveResolution], rho: &CMat) -> Result<Vec<f64>, HistoriesError> {
    let rho1 = match r1 {
        Some(r) => r.projectors.iter().fold(CMat::zeros(rho.nrows(), rho.ncols()), |acc, p| acc + &p.matrix * rho * &p.matrix),
        None => rho.clone(),
    };
    let steps = later.iter().enumerate().map(|(i, r)| FamilyStep { label: format!("O{}", i + 2), time: i as f64, resolution: (*r).clone() }).collect();
    let fam = HistoryFamily::new(steps)?;
    Ok(decoherence(&fam, &rho1).probabilities())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KickReport {
    /// `max |p(·|A1) − p(·)|` over the states.
    pub measurement_shift: f64,
    /// `max |p(·; UρU†) − p(·; ρ)|` for `U = exp(iθ A1)`.
    pub kick_shift: f64,
}

/// State-level check of the O1 independence of the later joint statistics,
/// over `states` and kick angles `thetas`, with `A1 = Σ a P_a` built from
/// `r1`.
pub fn kick_independence(r1: &ProjectiveResolution, later: &[&ProjectiveResolution], states: &[CMat], thetas: &[f64]) -> Result<KickReport, HistoriesError> {
    let a1 = r1.reconstruct();
    let mut report = KickReport { measurement_shift: 0.0, kick_shift: 0.0 };
    let gap = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    for rho in states {
        let base = joint_statistics(None, later, rho)?;
        report.measurement_shift = report.measurement_shift.max(gap(&joint_statistics(Some(r1), later, rho)?, &base));
        for &t in thetas {
            let u = linalg::exp_i_hermitian(&a1, t);
            let kicked = &u * rho * u.adjoint();
            report.kick_shift = report.kick_shift.max(gap(&joint_statistics(None, later, &kicked)?, &base));
        }
    }
    Ok(report)
}

/// Resolution of a Hermitian operator into eigenprojectors.
pub fn resolution_of(space: &ProductSpace, a: &CMat) -> Result<ProjectiveResolution, HistoriesError> {
    Ok(qops::spectral_resolution(&LocalOperator::new(space, a.clone())?, None)?)
}

/// `{|v⟩⟨v|}` for the columns of a unitary.
pub fn basis_resolution(space: &ProductSpace, u: &CMat) -> Result<ProjectiveResolution, HistoriesError> {
    let projectors = (0..u.ncols()).map(|k| LocalOperator::new(space, linalg::ket_bra(&u.column(k).into_owned()))).collect::<Result<Vec<_>, _>>()?;
    let values = (0..u.ncols()).map(|k| k as f64).collect();
    Ok(ProjectiveResolution::new(projectors, values)?)
}
