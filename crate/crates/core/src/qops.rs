//! Finite-dimensional quantum kernel on labelled tensor-product spaces.

use crate::causal::Region;
use crate::linalg::{self, cr, CMat, C64};
use serde::{Deserialize, Serialize};
use std::sync::RwLock;
use thiserror::Error;

/// Hard cap on the total Hilbert-space dimension.
pub const MAX_DIM: usize = 1 << 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QopsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown factor label `{0}`")]
    UnknownLabel(String),
    #[error("duplicate factor label `{0}`")]
    DuplicateLabel(String),
    #[error("invalid product space: {0}")]
    InvalidSpace(String),
    #[error("operator is not Hermitian (defect {defect:e})")]
    NotHermitian { defect: f64 },
    #[error("bins do not cover eigenvalue {value}")]
    BinsNotCovering { value: f64 },
    #[error("bins overlap at eigenvalue {value}")]
    BinsOverlap { value: f64 },
    #[error("operator is not an effect (spectrum [{min}, {max}])")]
    NotEffect { min: f64, max: f64 },
    #[error("outcome probability {p:e} is below threshold")]
    ZeroProbability { p: f64 },
    #[error("operands live on different spaces")]
    SpaceMismatch,
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid projective resolution: {0}")]
    InvalidResolution(String),
    #[error("operator does not factor as declared support ⊗ identity (defect {defect:e})")]
    SupportViolation { defect: f64 },
}

/// Numerical tolerances; overridable at start-up through
/// [`set_tolerances`] (the CLI maps `tol.*` configuration keys onto this).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub hermitian: f64,
    pub trace: f64,
    pub projector: f64,
    pub positivity: f64,
    pub degeneracy: f64,
    pub effect: f64,
    pub support: f64,
    pub min_probability: f64,
    pub operator: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            hermitian: 1e-12,
            trace: 1e-12,
            projector: 1e-10,
            positivity: 1e-10,
            degeneracy: 1e-9,
            effect: 1e-10,
            support: 1e-12,
            min_probability: 1e-14,
            operator: 1e-10,
        }
    }
}

static TOLERANCES: RwLock<Option<Tolerances>> = RwLock::new(None);

pub fn tolerances() -> Tolerances {
    TOLERANCES.read().ok().and_then(|g| *g).unwrap_or_default()
}

/// Install process-wide tolerances. Meant to be called once, before any
/// computation starts.
pub fn set_tolerances(t: Tolerances) {
    if let Ok(mut g) = TOLERANCES.write() {
        *g = Some(t);
    }
}

impl Tolerances {
    /// Apply a `tol.<name>` key. Returns false for unknown keys.
    pub fn set_key(&mut self, key: &str, value: f64) -> bool {
        let name = key.strip_prefix("tol.").unwrap_or(key);
        let slot = match name {
            "hermitian" => &mut self.hermitian,
            "trace" => &mut self.trace,
            "projector" => &mut self.projector,
            "positivity" => &mut self.positivity,
            "degeneracy" => &mut self.degeneracy,
            "effect" => &mut self.effect,
            "support" => &mut self.support,
            "min_probability" => &mut self.min_probability,
            "operator" => &mut self.operator,
            _ => return false,
        };
        *slot = value;
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductSpace {
    factors: Vec<(String, usize)>,
}

impl ProductSpace {
    pub fn new<S: AsRef<str>>(factors: &[(S, usize)]) -> Result<Self, QopsError> {
        if factors.is_empty() {
            return Err(QopsError::InvalidSpace("no factors".into()));
        }
        let mut out: Vec<(String, usize)> = Vec::new();
        let mut dim = 1usize;
        for (l, d) in factors {
            let l = l.as_ref().to_string();
            if *d == 0 {
                return Err(QopsError::InvalidSpace(format!("factor `{l}` has dimension 0")));
            }
            if out.iter().any(|(o, _)| *o == l) {
                return Err(QopsError::DuplicateLabel(l));
            }
            dim = dim.saturating_mul(*d);
            if dim > MAX_DIM {
                return Err(QopsError::InvalidSpace(format!("total dimension exceeds {MAX_DIM}")));
            }
            out.push((l, *d));
        }
        Ok(ProductSpace { factors: out })
    }

    pub fn qubits<S: AsRef<str>>(labels: &[S]) -> Result<Self, QopsError> {
        let f: Vec<(&str, usize)> = labels.iter().map(|l| (l.as_ref(), 2)).collect();
        ProductSpace::new(&f)
    }

    pub fn dim(&self) -> usize {
        self.factors.iter().map(|f| f.1).product()
    }

    pub fn factors(&self) -> &[(String, usize)] {
        &self.factors
    }

    pub fn labels(&self) -> Vec<String> {
        self.factors.iter().map(|f| f.0.clone()).collect()
    }

    pub fn index_of(&self, label: &str) -> Result<usize, QopsError> {
        self.factors.iter().position(|f| f.0 == label).ok_or_else(|| QopsError::UnknownLabel(label.to_string()))
    }

    pub fn factor_dim(&self, label: &str) -> Result<usize, QopsError> {
        Ok(self.factors[self.index_of(label)?].1)
    }

    /// Row-major strides of each factor in the global index.
    fn strides(&self) -> Vec<usize> {
        let n = self.factors.len();
        let mut s = vec![1usize; n];
        for i in (0..n.saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.factors[i + 1].1;
        }
        s
    }

    /// Digits of a global basis index, one per factor.
    pub fn digits(&self, mut idx: usize) -> Vec<usize> {
        let mut d = vec![0; self.factors.len()];
        for i in (0..self.factors.len()).rev() {
            d[i] = idx % self.factors[i].1;
            idx /= self.factors[i].1;
        }
        d
    }

    fn index_from_digits(&self, digits: &[usize]) -> usize {
        digits.iter().zip(self.strides()).map(|(d, s)| d * s).sum()
    }

    /// Sub-space built from a subset of labels, in this space's order.
    pub fn subspace(&self, labels: &[String]) -> Result<ProductSpace, QopsError> {
        for l in labels {
            self.index_of(l)?;
        }
        let f: Vec<(String, usize)> = self.factors.iter().filter(|(l, _)| labels.contains(l)).cloned().collect();
        ProductSpace::new(&f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOperator {
    pub space: ProductSpace,
    pub matrix: CMat,
    pub region: Option<Region>,
    pub support: Vec<String>,
}

impl LocalOperator {
    /// Operator with full support.
    pub fn new(space: &ProductSpace, matrix: CMat) -> Result<Self, QopsError> {
        if matrix.nrows() != space.dim() || matrix.ncols() != space.dim() {
            return Err(QopsError::DimensionMismatch { expected: space.dim(), got: matrix.nrows() });
        }
        Ok(LocalOperator { space: space.clone(), matrix, region: None, support: space.labels() })
    }

    pub fn identity(space: &ProductSpace) -> Self {
        LocalOperator::new(space, linalg::identity(space.dim())).expect("identity has matching dimension")
    }

    pub fn with_region(mut self, r: Region) -> Self {
        self.region = Some(r);
        self
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        linalg::hermiticity_defect(&self.matrix) <= tol
    }

    pub fn adjoint(&self) -> Self {
        LocalOperator { matrix: self.matrix.adjoint(), ..self.clone() }
    }

    /// Product keeping the union of supports.
    pub fn mul(&self, other: &LocalOperator) -> Result<Self, QopsError> {
        if self.space != other.space {
            return Err(QopsError::SpaceMismatch);
        }
        let mut support = self.support.clone();
        for l in &other.support {
            if !support.contains(l) {
                support.push(l.clone());
            }
        }
        Ok(LocalOperator { space: self.space.clone(), matrix: &self.matrix * &other.matrix, region: None, support })
    }

    /// Check the declared support: the operator equals its restriction
    /// tensored with the identity on the complement.
    pub fn verify_support(&self) -> Result<(), QopsError> {
        let rest: Vec<String> = self.space.labels().into_iter().filter(|l| !self.support.contains(l)).collect();
        if rest.is_empty() {
            return Ok(());
        }
        let sub = self.space.subspace(&self.support)?;
        let reduced = partial_trace_matrix(&self.space, &self.matrix, &self.support)?;
        let comp_dim = (self.space.dim() / sub.dim()) as f64;
        let back = embed(&(reduced / cr(comp_dim)), &self.support, &self.space)?;
        let defect = linalg::max_abs(&(&back.matrix - &self.matrix));
        if defect > tolerances().support {
            return Err(QopsError::SupportViolation { defect });
        }
        Ok(())
    }
}

/// `op ⊗ 1`, permuted into the factor order of `space`.
pub fn embed<S: AsRef<str>>(op: &CMat, targets: &[S], space: &ProductSpace) -> Result<LocalOperator, QopsError> {
    let idx: Vec<usize> = targets.iter().map(|t| space.index_of(t.as_ref())).collect::<Result<_, _>>()?;
    for (k, i) in idx.iter().enumerate() {
        if idx[..k].contains(i) {
            return Err(QopsError::DuplicateLabel(targets[k].as_ref().to_string()));
        }
    }
    let tdims: Vec<usize> = idx.iter().map(|&i| space.factors()[i].1).collect();
    let tdim: usize = tdims.iter().product();
    if op.nrows() != tdim || op.ncols() != tdim {
        return Err(QopsError::DimensionMismatch { expected: tdim, got: op.nrows() });
    }
    let n = space.dim();
    let mut m = CMat::zeros(n, n);
    let sub_index = |digits: &[usize]| -> usize {
        let mut s = 0;
        for (k, &i) in idx.iter().enumerate() {
            s = s * tdims[k] + digits[i];
        }
        s
    };
    for row in 0..n {
        let dr = space.digits(row);
        let r = sub_index(&dr);
        for cidx in 0..tdim {
            // Column digits: copy the row digits outside the targets.
            let mut dc = dr.clone();
            let mut rem = cidx;
            for k in (0..idx.len()).rev() {
                dc[idx[k]] = rem % tdims[k];
                rem /= tdims[k];
            }
            let col = space.index_from_digits(&dc);
            let v = op[(r, cidx)];
            if v != C64::new(0.0, 0.0) {
                m[(row, col)] = v;
            }
        }
    }
    let support = targets.iter().map(|t| t.as_ref().to_string()).collect();
    Ok(LocalOperator { space: space.clone(), matrix: m, region: None, support })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityState {
    pub space: ProductSpace,
    pub matrix: CMat,
}

impl DensityState {
    pub fn new(space: &ProductSpace, matrix: CMat) -> Result<Self, QopsError> {
        let tol = tolerances();
        if matrix.nrows() != space.dim() || matrix.ncols() != space.dim() {
            return Err(QopsError::DimensionMismatch { expected: space.dim(), got: matrix.nrows() });
        }
        let herm = linalg::hermiticity_defect(&matrix);
        if herm > tol.hermitian {
            return Err(QopsError::InvalidState(format!("not Hermitian (defect {herm:e})")));
        }
        let tr = matrix.trace();
        if (tr.re - 1.0).abs() > tol.trace || tr.im.abs() > tol.trace {
            return Err(QopsError::InvalidState(format!("trace {tr} differs from 1")));
        }
        let (vals, _) = linalg::eigh(&matrix);
        if vals[0] < -tol.positivity {
            return Err(QopsError::InvalidState(format!("negative eigenvalue {}", vals[0])));
        }
        Ok(DensityState { space: space.clone(), matrix })
    }

    /// Build without validation, after an operation known to preserve the
    /// invariants up to rounding; Hermiticity is restored exactly.
    pub(crate) fn trusted(space: &ProductSpace, matrix: CMat) -> Self {
        DensityState { space: space.clone(), matrix: linalg::hermitian_part(&matrix) }
    }

    pub fn pure(space: &ProductSpace, psi: &linalg::CVec) -> Result<Self, QopsError> {
        if psi.len() != space.dim() {
            return Err(QopsError::DimensionMismatch { expected: space.dim(), got: psi.len() });
        }
        let n = psi.norm();
        if n == 0.0 {
            return Err(QopsError::InvalidState("zero vector".into()));
        }
        let v = psi / cr(n);
        DensityState::new(space, linalg::ket_bra(&v))
    }

    /// Tensor product of per-factor states, in the order of `space`.
    pub fn product(space: &ProductSpace, parts: &[CMat]) -> Result<Self, QopsError> {
        DensityState::new(space, linalg::kron_all(parts))
    }

    pub fn maximally_mixed(space: &ProductSpace) -> Self {
        let n = space.dim();
        DensityState::trusted(space, linalg::identity(n) / cr(n as f64))
    }

    pub fn conjugate(&self, u: &CMat) -> Result<Self, QopsError> {
        if u.nrows() != self.space.dim() {
            return Err(QopsError::DimensionMismatch { expected: self.space.dim(), got: u.nrows() });
        }
        Ok(DensityState::trusted(&self.space, u * &self.matrix * u.adjoint()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
}

impl Bin {
    /// Half-open interval `[lo, hi)`; infinite ends allowed.
    pub fn new(lo: f64, hi: f64) -> Self {
        Bin { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v < self.hi
    }
}

#[derive(Debug, Clone)]
pub struct ProjectiveResolution {
    pub projectors: Vec<LocalOperator>,
    /// Representative eigenvalue of each projector (mean of the grouped
    /// eigenvalues).
    pub values: Vec<f64>,
    pub bins: Option<Vec<Bin>>,
}

impl ProjectiveResolution {
    /// Validate idempotency, Hermiticity, orthogonality and completeness.
    pub fn new(projectors: Vec<LocalOperator>, values: Vec<f64>) -> Result<Self, QopsError> {
        let r = ProjectiveResolution { projectors, values, bins: None };
        r.validate()?;
        Ok(r)
    }

    pub fn space(&self) -> &ProductSpace {
        &self.projectors[0].space
    }

    pub fn validate(&self) -> Result<(), QopsError> {
        let tol = tolerances().projector;
        let bad = |m: String| Err(QopsError::InvalidResolution(m));
        if self.projectors.is_empty() {
            return bad("no projectors".into());
        }
        if self.values.len() != self.projectors.len() {
            return bad("values and projectors differ in length".into());
        }
        let space = &self.projectors[0].space;
        let n = space.dim();
        let mut sum = CMat::zeros(n, n);
        for (i, p) in self.projectors.iter().enumerate() {
            if &p.space != space {
                return Err(QopsError::SpaceMismatch);
            }
            let m = &p.matrix;
            if linalg::hermiticity_defect(m) > tol {
                return bad(format!("projector {i} not Hermitian"));
            }
            if linalg::max_abs(&(m * m - m)) > tol {
                return bad(format!("projector {i} not idempotent"));
            }
            for (j, q) in self.projectors.iter().enumerate().skip(i + 1) {
                if linalg::max_abs(&(m * &q.matrix)) > tol {
                    return bad(format!("projectors {i} and {j} not orthogonal"));
                }
            }
            sum += m;
        }
        if linalg::max_abs(&(sum - linalg::identity(n))) > tol {
            return bad("projectors do not sum to the identity".into());
        }
        Ok(())
    }

    /// Two-outcome resolution `{P, 1 - P}`.
    pub fn binary(p: &LocalOperator) -> Result<Self, QopsError> {
        let n = p.space.dim();
        let q = LocalOperator { matrix: linalg::identity(n) - &p.matrix, ..p.clone() };
        ProjectiveResolution::new(vec![p.clone(), q], vec![1.0, 0.0])
    }

    pub fn trivial(space: &ProductSpace) -> Self {
        ProjectiveResolution { projectors: vec![LocalOperator::identity(space)], values: vec![1.0], bins: None }
    }

    /// `Σ_n λ_n E_n`.
    pub fn reconstruct(&self) -> CMat {
        let n = self.space().dim();
        self.projectors.iter().zip(&self.values).fold(CMat::zeros(n, n), |acc, (p, &v)| acc + &p.matrix * cr(v))
    }
}

/// Eigen-decomposition of a Hermitian operator, eigenvalues grouped either by
/// the supplied bins or by a relative degeneracy tolerance.
pub fn spectral_resolution(a: &LocalOperator, bins: Option<&[Bin]>) -> Result<ProjectiveResolution, QopsError> {
    let tol = tolerances();
    let defect = linalg::hermiticity_defect(&a.matrix);
    if defect > tol.projector {
        return Err(QopsError::NotHermitian { defect });
    }
    let (vals, vecs) = linalg::eigh(&a.matrix);
    let n = vals.len();
    let groups: Vec<(Vec<usize>, Option<Bin>)> = match bins {
        None => {
            let scale = vals.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let mut gs: Vec<(Vec<usize>, Option<Bin>)> = Vec::new();
            for i in 0..n {
                match gs.last_mut() {
                    Some((g, _)) if (vals[i] - vals[*g.last().unwrap()]).abs() <= tol.degeneracy * scale => g.push(i),
                    _ => gs.push((vec![i], None)),
                }
            }
            gs
        }
        Some(bs) => {
            let mut gs: Vec<(Vec<usize>, Option<Bin>)> = bs.iter().map(|b| (Vec::new(), Some(*b))).collect();
            for (i, &v) in vals.iter().enumerate() {
                let hits: Vec<usize> = bs.iter().enumerate().filter(|(_, b)| b.contains(v)).map(|(k, _)| k).collect();
                match hits.len() {
                    0 => return Err(QopsError::BinsNotCovering { value: v }),
                    1 => gs[hits[0]].0.push(i),
                    _ => return Err(QopsError::BinsOverlap { value: v }),
                }
            }
            gs.into_iter().filter(|(g, _)| !g.is_empty()).collect()
        }
    };
    let mut projectors = Vec::new();
    let mut values = Vec::new();
    let mut used_bins = Vec::new();
    for (g, b) in groups {
        let mut p = CMat::zeros(n, n);
        for &i in &g {
            let v = vecs.column(i);
            p += v * v.adjoint();
        }
        values.push(g.iter().map(|&i| vals[i]).sum::<f64>() / g.len() as f64);
        projectors.push(LocalOperator { space: a.space.clone(), matrix: p, region: a.region.clone(), support: a.support.clone() });
        if let Some(b) = b {
            used_bins.push(b);
        }
    }
    Ok(ProjectiveResolution { projectors, values, bins: bins.map(|_| used_bins) })
}

fn check_effect(e: &CMat) -> Result<(), QopsError> {
    let tol = tolerances().effect;
    let defect = linalg::hermiticity_defect(e);
    if defect > tol {
        return Err(QopsError::NotHermitian { defect });
    }
    let (vals, _) = linalg::eigh(e);
    let (min, max) = (vals[0], vals[vals.len() - 1]);
    if min < -tol || max > 1.0 + tol {
        return Err(QopsError::NotEffect { min, max });
    }
    Ok(())
}

/// `tr(ρ E)` for an effect `0 ≤ E ≤ 1`, clamped to `[0, 1]`.
pub fn born_probability(rho: &DensityState, e: &LocalOperator) -> Result<f64, QopsError> {
    if rho.space != e.space {
        return Err(QopsError::SpaceMismatch);
    }
    check_effect(&e.matrix)?;
    Ok(trace_product(&rho.matrix, &e.matrix).re.clamp(0.0, 1.0))
}

/// `tr(A B)` without forming the product.
pub fn trace_product(a: &CMat, b: &CMat) -> C64 {
    let n = a.nrows();
    let mut s = C64::new(0.0, 0.0);
    for i in 0..n {
        for k in 0..n {
            s += a[(i, k)] * b[(k, i)];
        }
    }
    s
}

/// `ρ ↦ Σ_n E_n ρ E_n`.
pub fn luders_nonselective(rho: &DensityState, r: &ProjectiveResolution) -> Result<DensityState, QopsError> {
    if r.space() != &rho.space {
        return Err(QopsError::SpaceMismatch);
    }
    let n = rho.space.dim();
    let mut out = CMat::zeros(n, n);
    for p in &r.projectors {
        out += &p.matrix * &rho.matrix * &p.matrix;
    }
    Ok(DensityState::trusted(&rho.space, out))
}

/// `(EρE / tr(ρE), tr(ρE))`.
pub fn luders_selective(rho: &DensityState, e: &LocalOperator) -> Result<(DensityState, f64), QopsError> {
    if rho.space != e.space {
        return Err(QopsError::SpaceMismatch);
    }
    let p = trace_product(&rho.matrix, &e.matrix).re;
    if p <= tolerances().min_probability {
        return Err(QopsError::ZeroProbability { p });
    }
    let m = &e.matrix * &rho.matrix * &e.matrix / cr(p);
    Ok((DensityState::trusted(&rho.space, m), p))
}

/// Partial trace over every factor not in `keep`, on a raw matrix.
pub fn partial_trace_matrix(space: &ProductSpace, m: &CMat, keep: &[String]) -> Result<CMat, QopsError> {
    for k in keep {
        space.index_of(k)?;
    }
    let kept: Vec<usize> = (0..space.factors().len()).filter(|&i| keep.contains(&space.factors()[i].0)).collect();
    let kdims: Vec<usize> = kept.iter().map(|&i| space.factors()[i].1).collect();
    let kd: usize = kdims.iter().product();
    let n = space.dim();
    let mut out = CMat::zeros(kd, kd);
    let sub = |d: &[usize]| kept.iter().zip(&kdims).fold(0, |s, (&i, &dim)| s * dim + d[i]);
    let traced: Vec<usize> = (0..space.factors().len()).filter(|i| !kept.contains(i)).collect();
    for row in 0..n {
        let dr = space.digits(row);
        let r = sub(&dr);
        // Columns sharing the traced digits of the row.
        for kc in 0..kd {
            let mut dc = dr.clone();
            let mut rem = kc;
            for k in (0..kept.len()).rev() {
                dc[kept[k]] = rem % kdims[k];
                rem /= kdims[k];
            }
            debug_assert!(traced.iter().all(|&t| dc[t] == dr[t]));
            let col = space.index_from_digits(&dc);
            out[(r, kc)] += m[(row, col)];
        }
    }
    Ok(out)
}

pub fn partial_trace<S: AsRef<str>>(rho: &DensityState, keep: &[S]) -> Result<DensityState, QopsError> {
    let keep: Vec<String> = keep.iter().map(|s| s.as_ref().to_string()).collect();
    let sub = rho.space.subspace(&keep)?;
    let m = partial_trace_matrix(&rho.space, &rho.matrix, &keep)?;
    Ok(DensityState::trusted(&sub, m))
}

/// `tr(ρ A)`.
pub fn expectation(rho: &DensityState, a: &LocalOperator) -> Result<C64, QopsError> {
    if rho.space != a.space {
        return Err(QopsError::SpaceMismatch);
    }
    Ok(trace_product(&rho.matrix, &a.matrix))
}

/// Heisenberg-picture conjugation `U† A U`.
pub fn heisenberg(a: &LocalOperator, u: &CMat) -> LocalOperator {
    LocalOperator { matrix: u.adjoint() * &a.matrix * u, support: a.space.labels(), ..a.clone() }
}
