//! Two-level detectors linearly coupled to the lattice field.
//!
//! Detector basis: index 0 is the ground state `|g>`, index 1 the excited
//! state `|e>`, and `σ+ = |e><g|`. The monopole is
//! `μ(t) = e^{iωt} σ+ + e^{-iωt} σ-`. The interaction at step `n` is
//! `H_n = Σ_ν λ_ν χ_ν(n) μ_ν(n dt) ⊗ Σ_x a F_ν(x) φ(n, x)` and the
//! scattering operator is the step-ordered product of `exp(-i dt H_n)`.
//!
//! Expanding each step exponential to second order gives the discrete
//! time-ordered series with `θ(0) = 1/2` on the diagonal. Tracing out the
//! field and detector A from the `λA λB` part of that series leaves
//!
//! ```text
//! ρ_signal = dt² Σ_{n,m} θ(m - n) χA(n) χB(m) <μA(n)> C(n, m) [μB(m), ρB]
//! ```
//!
//! with `C(n, m) = <[φA(n), φB(m)]>` the spatially smeared commutator. This
//! is `2 Σ dt² χA χB C d(t, t')` with `d = ½ θ(t' - t) <μA(t)> [μB(t'), ρB]`,
//! and equals `-i[Σ, ρB]` with `Σ = Σ dV dV' <J_A(x')> G_R(x, x') J_B(x)`.

use crate::causal::{self, Configuration, Region};
use crate::field::{Cell, FieldError, FieldModel, FockBackend, SmearingFn, TwoPointKernel};
use crate::linalg::{self, c, cr, CMat, C64};
use crate::qops::{self, DensityState, LocalOperator, ProductSpace, QopsError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("invalid detector `{label}`: {reason}")]
    InvalidDetector { label: String, reason: String },
    #[error("regions are not causally orderable: O_B meets the past of O_A")]
    NotCausallyOrderable,
    #[error("configuration is not of Sorkin type ({0:?})")]
    NotSorkinType(Configuration),
    #[error("kick smearing must live on a single step")]
    KickNotSingleStep,
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Qops(#[from] QopsError),
}

/// `e^{iωt} σ+ + e^{-iωt} σ-`.
pub fn monopole(omega: f64, t: f64) -> CMat {
    let mut m = CMat::zeros(2, 2);
    m[(1, 0)] = C64::from_polar(1.0, omega * t);
    m[(0, 1)] = C64::from_polar(1.0, -omega * t);
    m
}

/// `diag(1, -1)` in the detector basis (ground first).
pub fn sigma_z() -> CMat {
    linalg::pauli_z()
}

pub fn ground() -> CMat {
    linalg::ket_bra(&linalg::basis_vec(2, 0))
}

pub fn excited() -> CMat {
    linalg::ket_bra(&linalg::basis_vec(2, 1))
}

/// `|+><+|` with `|+> = (|g> + |e>)/√2`.
pub fn plus() -> CMat {
    (linalg::identity(2) + linalg::pauli_x()) * cr(0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub label: String,
    pub gap: f64,
    pub coupling: f64,
    /// `χ(step)`.
    pub switching: Vec<(i64, f64)>,
    /// `F(site)`.
    pub smearing: Vec<(i64, f64)>,
    pub pointlike: bool,
}

impl DetectorSpec {
    pub fn new(
        label: &str,
        gap: f64,
        coupling: f64,
        switching: Vec<(i64, f64)>,
        smearing: Vec<(i64, f64)>,
    ) -> Result<Self, DetectorError> {
        let d = DetectorSpec { label: label.into(), gap, coupling, switching, smearing, pointlike: false };
        d.validate()?;
        Ok(d)
    }

    /// Delta-function smearing `F = δ_{x, site}/a`.
    pub fn pointlike(label: &str, gap: f64, coupling: f64, switching: Vec<(i64, f64)>, site: i64, spacing: f64) -> Result<Self, DetectorError> {
        let d = DetectorSpec { label: label.into(), gap, coupling, switching, smearing: vec![(site, 1.0 / spacing)], pointlike: true };
        d.validate()?;
        Ok(d)
    }

    /// Box switching on `steps`, box smearing of unit integral on `sites`.
    pub fn boxed(label: &str, gap: f64, coupling: f64, steps: (i64, i64), sites: (i64, i64), spacing: f64) -> Result<Self, DetectorError> {
        let w = (sites.1 - sites.0 + 1) as f64 * spacing;
        let chi = (steps.0..=steps.1).map(|s| (s, 1.0)).collect();
        let f = (sites.0..=sites.1).map(|x| (x, 1.0 / w)).collect();
        DetectorSpec::new(label, gap, coupling, chi, f)
    }

    /// Gaussian smearing truncated at six widths, normalised to unit integral.
    pub fn gaussian_smearing(center: f64, sigma: f64, spacing: f64) -> Vec<(i64, f64)> {
        let lo = (center - 6.0 * sigma).ceil() as i64;
        let hi = (center + 6.0 * sigma).floor() as i64;
        let raw: Vec<(i64, f64)> = (lo..=hi).map(|x| (x, (-((x as f64 - center) / sigma).powi(2) / 2.0).exp())).collect();
        let total: f64 = raw.iter().map(|p| p.1).sum::<f64>() * spacing;
        raw.into_iter().map(|(x, v)| (x, v / total)).collect()
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |r: &str| Err(DetectorError::InvalidDetector { label: self.label.clone(), reason: r.into() });
        if !(self.coupling >= 0.0) {
            return bad("coupling must be non-negative");
        }
        if !self.gap.is_finite() {
            return bad("gap must be finite");
        }
        if self.switching.iter().all(|p| p.1 == 0.0) || self.smearing.iter().all(|p| p.1 == 0.0) {
            return bad("switching and smearing need non-empty support");
        }
        if self.pointlike && self.smearing.iter().filter(|p| p.1 != 0.0).count() != 1 {
            return bad("pointlike detectors couple at one site");
        }
        for v in [&self.switching, &self.smearing] {
            let mut keys: Vec<i64> = v.iter().map(|p| p.0).collect();
            keys.sort();
            if keys.windows(2).any(|w| w[0] == w[1]) {
                return bad("repeated sample index");
            }
            if v.iter().any(|p| !p.1.is_finite()) {
                return bad("non-finite sample");
            }
        }
        Ok(())
    }

    pub fn chi(&self, step: i64) -> f64 {
        self.switching.iter().find(|p| p.0 == step).map_or(0.0, |p| p.1)
    }

    pub fn steps(&self) -> Vec<i64> {
        let mut s: Vec<i64> = self.switching.iter().filter(|p| p.1 != 0.0).map(|p| p.0).collect();
        s.sort();
        s
    }

    fn sites(&self) -> Vec<(i64, f64)> {
        self.smearing.iter().copied().filter(|p| p.1 != 0.0).collect()
    }

    /// Lattice interaction region `supp(χ F)`.
    pub fn region(&self) -> Region {
        let cells: Vec<Cell> = self.steps().into_iter().flat_map(|s| self.sites().into_iter().map(move |(x, _)| (s, x))).collect();
        Region::cells(&self.label, cells).expect("validated detector has support")
    }

    /// Spacetime smearing `Λ = χ F`.
    pub fn smearing_fn(&self) -> SmearingFn {
        SmearingFn::product(&self.label, &self.switching, &self.smearing).expect("validated detector has support")
    }

    /// Current `J(n, x) = χ(n) F(x) μ(n dt)`.
    pub fn current(&self, cell: Cell, dt: f64) -> CMat {
        let f = self.smearing.iter().find(|p| p.0 == cell.1).map_or(0.0, |p| p.1);
        monopole(self.gap, cell.0 as f64 * dt) * cr(self.chi(cell.0) * f)
    }

    /// Piecewise-constant refinement onto a lattice with half the spacing.
    pub fn refined(&self, spacing: f64) -> DetectorSpec {
        let split = |v: &[(i64, f64)]| v.iter().flat_map(|&(i, w)| [(2 * i, w), (2 * i + 1, w)]).collect::<Vec<_>>();
        let smearing = if self.pointlike { vec![(2 * self.sites()[0].0, 2.0 / spacing)] } else { split(&self.smearing) };
        DetectorSpec { switching: split(&self.switching), smearing, ..self.clone() }
    }
}

/// Spacelike pairs inside `supp(Λ)` and the largest
/// `‖[J(x), J(x')]‖`. Returns `(pairs above tolerance, max norm)`.
pub fn current_microcausality(d: &DetectorSpec, dt: f64) -> (usize, f64) {
    let cells: Vec<Cell> = d.region().cell_set().expect("lattice region").iter().copied().collect();
    let tol = qops::tolerances().operator;
    let mut count = 0;
    let mut max = 0.0f64;
    for (i, &x) in cells.iter().enumerate() {
        for &y in &cells[i + 1..] {
            if (x.1 - y.1).abs() <= (x.0 - y.0).abs() {
                continue;
            }
            let v = linalg::op_norm(&linalg::commutator(&d.current(x, dt), &d.current(y, dt)));
            if v > tol {
                count += 1;
            }
            max = max.max(v);
        }
    }
    (count, max)
}

/// Source of vacuum two-point functions.
pub trait Kernel: Sync {
    fn model(&self) -> &FieldModel;
    fn w(&self, x: Cell, y: Cell) -> Result<C64, FieldError>;
}

impl Kernel for TwoPointKernel {
    fn model(&self) -> &FieldModel {
        &self.model
    }
    fn w(&self, x: Cell, y: Cell) -> Result<C64, FieldError> {
        self.wightman(x, y)
    }
}

impl Kernel for FockBackend {
    fn model(&self) -> &FieldModel {
        &self.model
    }
    /// Vacuum two-point function of the truncated modes.
    fn w(&self, x: Cell, y: Cell) -> Result<C64, FieldError> {
        Ok(self.two_point(x, y))
    }
}

/// `Σ_{x,y} a² F(x) G(y) W((n, x), (m, y))`.
fn smeared_w(k: &dyn Kernel, f: &[(i64, f64)], n: i64, g: &[(i64, f64)], m: i64) -> Result<C64, FieldError> {
    let a = k.model().spacing;
    let mut s = C64::new(0.0, 0.0);
    for &(x, fx) in f {
        for &(y, gy) in g {
            s += k.w((n, x), (m, y))? * cr(fx * gy * a * a);
        }
    }
    Ok(s)
}

/// Discrete step function with `θ(0) = 1/2`.
fn theta(d: i64) -> f64 {
    match d.cmp(&0) {
        std::cmp::Ordering::Greater => 1.0,
        std::cmp::Ordering::Equal => 0.5,
        std::cmp::Ordering::Less => 0.0,
    }
}

fn expect2(rho: &CMat, m: &CMat) -> C64 {
    qops::trace_product(rho, m)
}

/// Second-order reduced state of detector B.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbativeState {
    pub rho0: CMat,
    /// Coefficient of `λA λB`.
    pub signal: CMat,
    /// Coefficient of `λA²` (identically zero on B).
    pub noise_a: CMat,
    /// Coefficient of `λB²`.
    pub noise_b: CMat,
}

impl PerturbativeState {
    pub fn evaluate(&self, la: f64, lb: f64) -> CMat {
        &self.rho0 + &self.signal * cr(la * lb) + &self.noise_a * cr(la * la) + &self.noise_b * cr(lb * lb)
    }
}

/// Signal and noise terms of B's reduced state at second order.
pub fn signal_noise_split(a: &DetectorSpec, b: &DetectorSpec, kernel: &dyn Kernel, rho_a: &CMat, rho_b: &CMat) -> Result<PerturbativeState, DetectorError> {
    let dt = kernel.model().dt;
    let (fa, fb) = (a.sites(), b.sites());
    let mut signal = CMat::zeros(2, 2);
    for n in a.steps() {
        let ma = expect2(rho_a, &monopole(a.gap, n as f64 * dt)).re;
        for m in b.steps() {
            let th = theta(m - n);
            if th == 0.0 || ma == 0.0 {
                continue;
            }
            let cnm = smeared_w(kernel, &fa, n, &fb, m)? - smeared_w(kernel, &fb, m, &fa, n)?;
            let mu = monopole(b.gap, m as f64 * dt);
            signal += linalg::commutator(&mu, rho_b) * (cnm * cr(dt * dt * th * a.chi(n) * b.chi(m) * ma));
        }
    }
    let mut noise = CMat::zeros(2, 2);
    for n in b.steps() {
        let mn = monopole(b.gap, n as f64 * dt);
        for m in b.steps() {
            let mm = monopole(b.gap, m as f64 * dt);
            let w_mn = smeared_w(kernel, &fb, m, &fb, n)?;
            let w_nm = smeared_w(kernel, &fb, n, &fb, m)?;
            let k = cr(dt * dt * b.chi(n) * b.chi(m));
            let th = cr(theta(n - m));
            noise += (&mn * rho_b * &mm * w_mn - &mn * &mm * rho_b * w_nm * th - rho_b * &mm * &mn * w_mn * th) * k;
        }
    }
    Ok(PerturbativeState { rho0: rho_b.clone(), signal, noise_a: CMat::zeros(2, 2), noise_b: noise })
}

/// `λA λB` coefficient of B's reduced state from the unsimplified
/// second-order product expansion (six Wightman-ordered terms).
pub fn signal_term_direct(a: &DetectorSpec, b: &DetectorSpec, kernel: &dyn Kernel, rho_a: &CMat, rho_b: &CMat) -> Result<CMat, DetectorError> {
    let dt = kernel.model().dt;
    let (fa, fb) = (a.sites(), b.sites());
    let mut out = CMat::zeros(2, 2);
    for n in a.steps() {
        let ma = expect2(rho_a, &monopole(a.gap, n as f64 * dt));
        for m in b.steps() {
            let mu = monopole(b.gap, m as f64 * dt);
            let w_ab = smeared_w(kernel, &fa, n, &fb, m)?;
            let w_ba = smeared_w(kernel, &fb, m, &fa, n)?;
            let k = ma * cr(dt * dt * a.chi(n) * b.chi(m));
            let (t_ab, t_ba) = (cr(theta(n - m)), cr(theta(m - n)));
            // U1 ρ U1†
            let mut term = rho_b * &mu * w_ba + &mu * rho_b * w_ab;
            // U2 ρ
            term -= &mu * rho_b * (w_ab * t_ab + w_ba * t_ba);
            // ρ U2†
            term -= rho_b * &mu * (w_ab * t_ba + w_ba * t_ab);
            out += term * k;
        }
    }
    Ok(out)
}

/// `Σ = Σ dV dV' <J_A(x')> G_R(x, x') J_B(x)`.
pub fn sigma_operator(a: &DetectorSpec, rho_a: &CMat, b: &DetectorSpec, kernel: &dyn Kernel) -> Result<CMat, DetectorError> {
    let dt = kernel.model().dt;
    let (fa, fb) = (a.sites(), b.sites());
    let mut sigma = CMat::zeros(2, 2);
    for n in a.steps() {
        let ma = expect2(rho_a, &monopole(a.gap, n as f64 * dt)).re;
        if ma == 0.0 {
            continue;
        }
        for m in b.steps() {
            if m <= n {
                continue;
            }
            // G_R(b, a) = -i <[φB(m), φA(n)]>.
            let comm = smeared_w(kernel, &fb, m, &fa, n)? - smeared_w(kernel, &fa, n, &fb, m)?;
            let gr = c(0.0, -1.0) * comm;
            sigma += monopole(b.gap, m as f64 * dt) * (gr * cr(dt * dt * a.chi(n) * b.chi(m) * ma));
        }
    }
    Ok(sigma)
}

/// Signal-term trace norm on the given lattice and on one with half the
/// spacing (piecewise-constant refinement of both detectors).
pub fn quadrature_check(a: &DetectorSpec, b: &DetectorSpec, model: &FieldModel, rho_a: &CMat, rho_b: &CMat) -> Result<(f64, f64), DetectorError> {
    let coarse = TwoPointKernel::build(model);
    let s0 = signal_noise_split(a, b, &coarse, rho_a, rho_b)?.signal;
    let fine_model = FieldModel::with_options(model.mass, model.sites * 2, model.spacing / 2.0, model.drop_zero_mode, model.window * 2)?;
    let fine = TwoPointKernel::build(&fine_model);
    let s1 = signal_noise_split(&a.refined(fine_model.spacing), &b.refined(fine_model.spacing), &fine, rho_a, rho_b)?.signal;
    Ok((linalg::trace_norm(&s0), linalg::trace_norm(&s1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    Exact,
    Dyson(usize),
}

/// Detectors coupled to a truncated-Fock field. Factors: the detectors in
/// order, then the field modes.
#[derive(Debug, Clone)]
pub struct JointSystem {
    pub fock: FockBackend,
    pub dets: Vec<DetectorSpec>,
    pub space: ProductSpace,
}

/// Polynomial in the couplings: exponent vector per detector → matrix.
pub type CouplingPolynomial = BTreeMap<Vec<u8>, CMat>;

impl JointSystem {
    pub fn new(fock: &FockBackend, dets: &[DetectorSpec]) -> Result<Self, DetectorError> {
        let mut f: Vec<(String, usize)> = dets.iter().map(|d| (d.label.clone(), 2)).collect();
        f.extend(fock.space.factors().iter().cloned());
        let space = ProductSpace::new(&f)?;
        Ok(JointSystem { fock: fock.clone(), dets: dets.to_vec(), space })
    }

    fn det_dim(&self) -> usize {
        1 << self.dets.len()
    }

    pub fn steps(&self) -> Vec<i64> {
        let mut s: Vec<i64> = self.dets.iter().flat_map(|d| d.steps()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// `χ_ν(n) μ_ν(n dt) ⊗ φ(F_ν, n)` without the coupling.
    pub fn coupling_term(&self, nu: usize, n: i64) -> CMat {
        let d = &self.dets[nu];
        let dt = self.fock.model.dt;
        let mut parts: Vec<CMat> = (0..self.dets.len()).map(|_| linalg::identity(2)).collect();
        parts[nu] = monopole(d.gap, n as f64 * dt) * cr(d.chi(n));
        let det = linalg::kron_all(&parts);
        linalg::kron(&det, &self.fock.smeared_at_step(n, &d.sites()))
    }

    pub fn step_hamiltonian(&self, n: i64, couplings: &[f64]) -> CMat {
        let dim = self.space.dim();
        let mut h = CMat::zeros(dim, dim);
        for (nu, d) in self.dets.iter().enumerate() {
            if d.chi(n) != 0.0 && couplings[nu] != 0.0 {
                h += self.coupling_term(nu, n) * cr(couplings[nu]);
            }
        }
        h
    }

    fn couplings(&self) -> Vec<f64> {
        self.dets.iter().map(|d| d.coupling).collect()
    }

    /// Exact scattering operator with explicit couplings over `steps`.
    pub fn exact_with(&self, couplings: &[f64], steps: &[i64]) -> CMat {
        let dt = self.fock.model.dt;
        let mut s = linalg::identity(self.space.dim());
        for &n in steps {
            let h = self.step_hamiltonian(n, couplings);
            s = linalg::exp_i_hermitian(&h, -dt) * s;
        }
        s
    }

    /// Discrete Dyson series of the product over `steps`, truncated at
    /// total degree `max_order` in the couplings.
    pub fn dyson_polynomial(&self, max_order: usize, steps: &[i64]) -> CouplingPolynomial {
        let dt = self.fock.model.dt;
        let k = self.dets.len();
        let dim = self.space.dim();
        let mut poly: CouplingPolynomial = BTreeMap::new();
        poly.insert(vec![0; k], linalg::identity(dim));
        for &n in steps {
            let terms: Vec<(usize, CMat)> = (0..k).filter(|&nu| self.dets[nu].chi(n) != 0.0).map(|nu| (nu, self.coupling_term(nu, n))).collect();
            // Step factor Σ_j (-i dt H)^j / j! expanded in monomials.
            let mut step_poly: CouplingPolynomial = BTreeMap::new();
            step_poly.insert(vec![0; k], linalg::identity(dim));
            let mut power: CouplingPolynomial = step_poly.clone();
            for j in 1..=max_order {
                let mut next: CouplingPolynomial = BTreeMap::new();
                for (e, m) in &power {
                    for (nu, x) in &terms {
                        let mut e2 = e.clone();
                        e2[*nu] += 1;
                        let v = x * m * (c(0.0, -dt) / cr(j as f64));
                        next.entry(e2).and_modify(|acc| *acc += &v).or_insert(v);
                    }
                }
                for (e, m) in &next {
                    step_poly.entry(e.clone()).and_modify(|acc| *acc += m).or_insert(m.clone());
                }
                power = next;
            }
            poly = poly_mul(&step_poly, &poly, max_order);
        }
        poly
    }

    pub fn scattering_operator(&self, order: Order) -> LocalOperator {
        let steps = self.steps();
        let couplings = self.couplings();
        let m = match order {
            Order::Exact => self.exact_with(&couplings, &steps),
            Order::Dyson(n) => evaluate_polynomial(&self.dyson_polynomial(n, &steps), &couplings),
        };
        LocalOperator { space: self.space.clone(), matrix: m, region: None, support: self.space.labels() }
    }

    /// Embed a field-mode operator into the joint space.
    pub fn field_operator(&self, m: &CMat) -> CMat {
        linalg::kron(&linalg::identity(self.det_dim()), m)
    }

    /// Kraus-type field operator `<i| S |ψ>` for a single detector.
    pub fn kraus(&self, s: &CMat, i: usize, psi: &linalg::CVec) -> CMat {
        let f = self.fock.space.dim();
        let d = self.det_dim();
        let mut out = CMat::zeros(f, f);
        for j in 0..d {
            if psi[j] == C64::new(0.0, 0.0) {
                continue;
            }
            out += s.view((i * f, j * f), (f, f)) * psi[j];
        }
        out
    }
}

/// Product of polynomials truncated at total degree `max_order`.
pub fn poly_mul(left: &CouplingPolynomial, right: &CouplingPolynomial, max_order: usize) -> CouplingPolynomial {
    let mut out: CouplingPolynomial = BTreeMap::new();
    for (el, ml) in left {
        for (er, mr) in right {
            let e: Vec<u8> = el.iter().zip(er).map(|(a, b)| a + b).collect();
            if e.iter().map(|&x| x as usize).sum::<usize>() > max_order {
                continue;
            }
            let v = ml * mr;
            out.entry(e).and_modify(|acc| *acc += &v).or_insert(v);
        }
    }
    out
}

pub fn evaluate_polynomial(p: &CouplingPolynomial, couplings: &[f64]) -> CMat {
    let dim = p.values().next().map_or(0, |m| m.nrows());
    let mut out = CMat::zeros(dim, dim);
    for (e, m) in p {
        let w: f64 = e.iter().zip(couplings).map(|(&k, &l)| l.powi(k as i32)).product();
        out += m * cr(w);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationReport {
    /// `‖S_{A+B} - S_B S_A‖`.
    pub ordered_residual: f64,
    /// `‖S_A S_B - S_B S_A‖` when the regions are spacelike.
    pub commute_residual: Option<f64>,
    pub unitarity_defect: f64,
}

/// Compare the joint scattering operator of two detectors with the product
/// of the individual ones.
pub fn causal_factorization_check(sys: &JointSystem) -> Result<FactorizationReport, DetectorError> {
    assert_eq!(sys.dets.len(), 2, "factorization compares two detectors");
    let (ra, rb) = (sys.dets[0].region(), sys.dets[1].region());
    if causal::causal_past(&ra).intersects(&rb) {
        return Err(DetectorError::NotCausallyOrderable);
    }
    let steps = sys.steps();
    let (la, lb) = (sys.dets[0].coupling, sys.dets[1].coupling);
    let s_ab = sys.exact_with(&[la, lb], &steps);
    let s_a = sys.exact_with(&[la, 0.0], &steps);
    let s_b = sys.exact_with(&[0.0, lb], &steps);
    let ordered_residual = linalg::op_norm(&(&s_ab - &s_b * &s_a));
    let commute_residual = causal::spacelike(&ra, &rb).then(|| linalg::op_norm(&(&s_a * &s_b - &s_b * &s_a)));
    Ok(FactorizationReport { ordered_residual, commute_residual, unitarity_defect: linalg::unitarity_defect(&s_ab) })
}

/// `(P ⊗ 1) S ρ S† (P ⊗ 1) / tr(…)` and its probability.
pub fn detector_update_selective(rho: &DensityState, s: &CMat, p_det: &CMat, sys: &JointSystem) -> Result<(DensityState, f64), DetectorError> {
    let p = linalg::kron(p_det, &linalg::identity(sys.fock.space.dim()));
    let evolved = rho.conjugate(s)?;
    let proj = LocalOperator::new(&sys.space, p)?;
    Ok(qops::luders_selective(&evolved, &proj)?)
}

/// Non-selective field update in both forms: `Σ_i M_i ρ M_i†` and
/// `tr_d(S (|ψ><ψ| ⊗ ρ) S†)`.
pub fn detector_update_nonselective(rho_field: &CMat, s: &CMat, psi: &linalg::CVec, sys: &JointSystem) -> Result<(CMat, CMat), DetectorError> {
    let d = sys.det_dim();
    let kraus_form = (0..d).fold(CMat::zeros(rho_field.nrows(), rho_field.ncols()), |acc, i| {
        let m = sys.kraus(s, i, psi);
        acc + &m * rho_field * m.adjoint()
    });
    let joint = linalg::kron(&linalg::ket_bra(psi), rho_field);
    let evolved = s * joint * s.adjoint();
    let keep = sys.fock.space.labels();
    let trace_form = qops::partial_trace_matrix(&sys.space, &evolved, &keep)?;
    Ok((kraus_form, trace_form))
}

/// Dual of the non-selective update, `X ↦ Σ_i M_i† X M_i`.
pub fn dual_nonselective(x: &CMat, s: &CMat, psi: &linalg::CVec, sys: &JointSystem) -> CMat {
    (0..sys.det_dim()).fold(CMat::zeros(x.nrows(), x.ncols()), |acc, i| {
        let m = sys.kraus(s, i, psi);
        acc + m.adjoint() * x * &m
    })
}

/// First- and second-order Kraus operators of a single detector,
/// `M1 = -i dt Σ χ <i|μ(n)|ψ> φ_n`,
/// `M2 = -dt² Σ θ(n - m) χ(n) χ(m) <i|μ(n) μ(m)|ψ> φ_n φ_m`.
pub fn kraus_series(sys: &JointSystem, i: usize, psi: &linalg::CVec) -> (CMat, CMat) {
    let d = &sys.dets[0];
    let dt = sys.fock.model.dt;
    let f = sys.fock.space.dim();
    let steps = d.steps();
    let bra = linalg::basis_vec(2, i).adjoint();
    let fields: Vec<CMat> = steps.iter().map(|&n| sys.fock.smeared_at_step(n, &d.sites())).collect();
    let mus: Vec<CMat> = steps.iter().map(|&n| monopole(d.gap, n as f64 * dt)).collect();
    let mut m1 = CMat::zeros(f, f);
    let mut m2 = CMat::zeros(f, f);
    for (a, &n) in steps.iter().enumerate() {
        let amp = (&bra * &mus[a] * psi)[(0, 0)];
        m1 += &fields[a] * (amp * c(0.0, -dt * d.chi(n)));
        for (b, &m) in steps.iter().enumerate() {
            let th = theta(n - m);
            if th == 0.0 {
                continue;
            }
            let amp2 = (&bra * &mus[a] * &mus[b] * psi)[(0, 0)];
            m2 += &fields[a] * &fields[b] * (amp2 * cr(-dt * dt * th * d.chi(n) * d.chi(m)));
        }
    }
    (m1, m2)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

/// Field letter of the Heisenberg engine: the spatially smeared field of
/// detector `ν` at a step, or a probe smearing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Letter {
    Det(u8, i64),
    Probe(u16),
}

type Word = Vec<Letter>;

/// Perturbative Heisenberg-picture evolution of `M ⊗ (field word)` through
/// detector couplings and a field kick, with vacuum expectations evaluated
/// by Wick's theorem on the lattice kernel.
pub struct HeisenbergEngine<'k> {
    kernel: &'k dyn Kernel,
    dets: Vec<DetectorSpec>,
    probes: Vec<SmearingFn>,
    /// Largest total power of the detector couplings kept.
    pub lambda_budget: usize,
    /// Largest total order (couplings plus kick power) kept.
    pub total_budget: usize,
    wcache: std::cell::RefCell<BTreeMap<(Letter, Letter), C64>>,
}

/// Terms keyed by (powers of the couplings then the kick, word).
type Terms = BTreeMap<(Vec<u8>, Word), CMat>;

impl<'k> HeisenbergEngine<'k> {
    pub fn new(kernel: &'k dyn Kernel, dets: &[DetectorSpec], probes: &[SmearingFn], lambda_budget: usize, total_budget: usize) -> Self {
        HeisenbergEngine {
            kernel,
            dets: dets.to_vec(),
            probes: probes.to_vec(),
            lambda_budget,
            total_budget,
            wcache: Default::default(),
        }
    }

    fn det_dim(&self) -> usize {
        1 << self.dets.len()
    }

    fn embed_mu(&self, nu: usize, n: i64) -> CMat {
        let dt = self.kernel.model().dt;
        let mut parts: Vec<CMat> = (0..self.dets.len()).map(|_| linalg::identity(2)).collect();
        parts[nu] = monopole(self.dets[nu].gap, n as f64 * dt) * cr(self.dets[nu].chi(n));
        linalg::kron_all(&parts)
    }

    fn letter_samples(&self, l: Letter) -> Vec<(Cell, f64)> {
        let a = self.kernel.model().spacing;
        let dv = self.kernel.model().cell_volume();
        match l {
            Letter::Det(nu, n) => self.dets[nu as usize].sites().into_iter().map(|(x, w)| ((n, x), w * a)).collect(),
            Letter::Probe(k) => self.probes[k as usize].samples.iter().map(|(&c, &w)| (c, w * dv)).collect(),
        }
    }

    fn w_letters(&self, x: Letter, y: Letter) -> Result<C64, FieldError> {
        if let Some(v) = self.wcache.borrow().get(&(x, y)) {
            return Ok(*v);
        }
        let mut s = C64::new(0.0, 0.0);
        for (cx, wx) in self.letter_samples(x) {
            for (cy, wy) in self.letter_samples(y) {
                s += self.kernel.w(cx, cy)? * cr(wx * wy);
            }
        }
        self.wcache.borrow_mut().insert((x, y), s);
        Ok(s)
    }

    /// `-i <[φ(f), φ(letter)]>` for a kick smearing `f` (probe index).
    fn shift(&self, kick: u16, l: Letter) -> Result<C64, FieldError> {
        let k = Letter::Probe(kick);
        Ok(c(0.0, -1.0) * (self.w_letters(k, l)? - self.w_letters(l, k)?))
    }

    fn order(&self, e: &[u8]) -> (usize, usize) {
        let nd = self.dets.len();
        (e[..nd].iter().map(|&x| x as usize).sum(), e.iter().map(|&x| x as usize).sum())
    }

    fn add(terms: &mut Terms, key: (Vec<u8>, Word), m: CMat) {
        match terms.get_mut(&key) {
            Some(acc) => *acc += m,
            None => {
                terms.insert(key, m);
            }
        }
    }

    /// `e^{i dt H_n} O e^{-i dt H_n}` expanded as `Σ_k (i dt)^k/k! ad_H^k`.
    fn conjugate_step(&self, terms: &Terms, n: i64) -> Terms {
        let dt = self.kernel.model().dt;
        let active: Vec<(usize, CMat)> =
            (0..self.dets.len()).filter(|&nu| self.dets[nu].chi(n) != 0.0).map(|nu| (nu, self.embed_mu(nu, n))).collect();
        let mut acc = terms.clone();
        let mut cur = terms.clone();
        for k in 1..=self.lambda_budget {
            let mut next: Terms = BTreeMap::new();
            let f = c(0.0, dt / k as f64);
            for ((e, w), m) in &cur {
                for (nu, x) in &active {
                    let mut e2 = e.clone();
                    e2[*nu] += 1;
                    let (lam, tot) = self.order(&e2);
                    if lam > self.lambda_budget || tot > self.total_budget {
                        continue;
                    }
                    let letter = Letter::Det(*nu as u8, n);
                    let mut left = vec![letter];
                    left.extend_from_slice(w);
                    let mut right = w.clone();
                    right.push(letter);
                    Self::add(&mut next, (e2.clone(), left), x * m * f);
                    Self::add(&mut next, (e2, right), -(m * x) * f);
                }
            }
            if next.is_empty() {
                break;
            }
            for (key, m) in &next {
                Self::add(&mut acc, key.clone(), m.clone());
            }
            cur = next;
        }
        acc
    }

    /// Conjugation by `exp(iκ φ(f))`: every letter may be replaced by its
    /// c-number shift, raising the kick power by one.
    fn apply_kick(&self, terms: &Terms, kick: u16) -> Result<Terms, FieldError> {
        let kpos = self.dets.len();
        let mut out: Terms = BTreeMap::new();
        for ((e, w), m) in terms {
            let shifts: Vec<C64> = w.iter().map(|&l| self.shift(kick, l)).collect::<Result<_, _>>()?;
            for mask in 0u32..(1 << w.len()) {
                let cnt = mask.count_ones() as usize;
                let mut e2 = e.clone();
                e2[kpos] += cnt as u8;
                if self.order(&e2).1 > self.total_budget {
                    continue;
                }
                let mut factor = C64::new(1.0, 0.0);
                let mut rest = Vec::with_capacity(w.len());
                for (i, &l) in w.iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        factor *= shifts[i];
                    } else {
                        rest.push(l);
                    }
                }
                if factor == C64::new(0.0, 0.0) {
                    continue;
                }
                Self::add(&mut out, (e2, rest), m * factor);
            }
        }
        Ok(out)
    }

    fn wick(&self, w: &[Letter], memo: &mut BTreeMap<Word, C64>) -> Result<C64, FieldError> {
        if w.is_empty() {
            return Ok(C64::new(1.0, 0.0));
        }
        if w.len() % 2 == 1 {
            return Ok(C64::new(0.0, 0.0));
        }
        if let Some(v) = memo.get(w) {
            return Ok(*v);
        }
        let mut s = C64::new(0.0, 0.0);
        for j in 1..w.len() {
            let pair = self.w_letters(w[0], w[j])?;
            if pair == C64::new(0.0, 0.0) {
                continue;
            }
            let rest: Word = w[1..j].iter().chain(&w[j + 1..]).copied().collect();
            s += pair * self.wick(&rest, memo)?;
        }
        memo.insert(w.to_vec(), s);
        Ok(s)
    }

    /// Coefficients of `<V† (M ⊗ word) V>` by exponent vector, where `V` is
    /// the step-ordered detector evolution with an optional kick (probe
    /// index, step) inserted before the steps at or after the kick step.
    pub fn expectation_series(
        &self,
        observable: &CMat,
        word: &[u16],
        rho_det: &CMat,
        kick: Option<(u16, i64)>,
    ) -> Result<BTreeMap<Vec<u8>, C64>, FieldError> {
        let nexp = self.dets.len() + 1;
        let mut terms: Terms = BTreeMap::new();
        terms.insert((vec![0; nexp], word.iter().map(|&k| Letter::Probe(k)).collect()), observable.clone());
        let mut steps: Vec<i64> = self.dets.iter().flat_map(|d| d.steps()).collect();
        steps.sort();
        steps.dedup();
        let kick_step = kick.map(|k| k.1);
        let mut kicked = kick.is_none();
        for &n in steps.iter().rev() {
            if !kicked && n < kick_step.unwrap() {
                terms = self.apply_kick(&terms, kick.unwrap().0)?;
                kicked = true;
            }
            terms = self.conjugate_step(&terms, n);
        }
        if !kicked {
            terms = self.apply_kick(&terms, kick.unwrap().0)?;
        }
        let mut memo = BTreeMap::new();
        let mut out: BTreeMap<Vec<u8>, C64> = BTreeMap::new();
        for ((e, w), m) in &terms {
            let v = self.wick(w, &mut memo)?;
            if v == C64::new(0.0, 0.0) {
                continue;
            }
            let t = qops::trace_product(rho_det, m) * v;
            *out.entry(e.clone()).or_insert(C64::new(0.0, 0.0)) += t;
        }
        let _ = self.det_dim();
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderCoefficient {
    pub lambda_a: u8,
    pub lambda_b: u8,
    pub kick: u8,
    pub re: f64,
    pub im: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderEntry {
    pub order: usize,
    /// Root-sum-square of the kick-dependent coefficients at this order.
    pub kick_dependence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderCountReport {
    pub coefficients: Vec<OrderCoefficient>,
    pub per_order: Vec<OrderEntry>,
    pub first_nonzero_order: Option<usize>,
    pub threshold: f64,
}

impl OrderCountReport {
    pub fn coefficient(&self, a: u8, b: u8, k: u8) -> C64 {
        self.coefficients
            .iter()
            .find(|c| c.lambda_a == a && c.lambda_b == b && c.kick == k)
            .map_or(C64::new(0.0, 0.0), |c| C64::new(c.re, c.im))
    }

    /// `<D_B>` at the given couplings and kick strength.
    pub fn evaluate(&self, la: f64, lb: f64, kappa: f64) -> f64 {
        self.coefficients.iter().map(|c| c.re * la.powi(c.lambda_a as i32) * lb.powi(c.lambda_b as i32) * kappa.powi(c.kick as i32)).sum()
    }
}

/// Kick at O1, detector A at O2, detector B at O3.
#[derive(Debug, Clone, PartialEq)]
pub struct TripartiteSetup {
    pub kick: SmearingFn,
    pub a: DetectorSpec,
    pub b: DetectorSpec,
    pub rho_a: CMat,
    pub rho_b: CMat,
    pub observable_b: CMat,
    pub max_order: usize,
}

/// Threshold separating numerically vanishing coefficients.
pub const ORDER_THRESHOLD: f64 = 1e-9;

/// Expand `<D_B>` jointly in `λA`, `λB` and the kick strength and report
/// the kick-dependent coefficients per total order.
pub fn tripartite_order_count(setup: &TripartiteSetup, kernel: &dyn Kernel) -> Result<OrderCountReport, DetectorError> {
    let steps = setup.kick.steps();
    if steps.len() != 1 {
        return Err(DetectorError::KickNotSingleStep);
    }
    let conf = causal::classify_configuration(&setup.kick.support, &setup.a.region(), &setup.b.region());
    if conf != Configuration::SorkinType {
        return Err(DetectorError::NotSorkinType(conf));
    }
    let dets = [setup.a.clone(), setup.b.clone()];
    let engine = HeisenbergEngine::new(kernel, &dets, std::slice::from_ref(&setup.kick), setup.max_order, setup.max_order);
    let obs = linalg::kron(&linalg::identity(2), &setup.observable_b);
    let rho = linalg::kron(&setup.rho_a, &setup.rho_b);
    let series = engine.expectation_series(&obs, &[], &rho, Some((0, steps[0])))?;
    let coefficients: Vec<OrderCoefficient> =
        series.iter().map(|(e, v)| OrderCoefficient { lambda_a: e[0], lambda_b: e[1], kick: e[2], re: v.re, im: v.im }).collect();
    let per_order: Vec<OrderEntry> = (1..=setup.max_order)
        .map(|n| {
            let s: f64 = coefficients
                .iter()
                .filter(|c| c.kick >= 1 && (c.lambda_a + c.lambda_b + c.kick) as usize == n)
                .map(|c| c.re * c.re + c.im * c.im)
                .sum();
            OrderEntry { order: n, kick_dependence: s.sqrt() }
        })
        .collect();
    let first_nonzero_order = per_order.iter().find(|o| o.kick_dependence > ORDER_THRESHOLD).map(|o| o.order);
    Ok(OrderCountReport { coefficients, per_order, first_nonzero_order, threshold: ORDER_THRESHOLD })
}

/// Tripartite presets on a massless 32-site lattice. The kick sits at cell
/// `(0, 0)`. In `extended` detector A covers sites 1..=5 at steps 2 and 3:
/// the kick reaches `(2, 1)` while `(2, 4)` and `(3, 5)` reach B at `(5, 6)`.
/// In `pointlike` A sits at site 3 for steps 1..=4; only its last step is
/// reached by the kick and only its first steps reach B at `(3, 4)`.
pub fn tripartite_preset(name: &str) -> Result<(FieldModel, TripartiteSetup), DetectorError> {
    let model = FieldModel::new(0.0, 32, 1.0)?;
    let kick = SmearingFn::boxed("O1", (0, 0), (0, 0), 1.0)?;
    let (a, b) = match name {
        "extended" => (
            DetectorSpec::boxed("A", 1.1, 1.0, (2, 3), (1, 5), 1.0)?,
            DetectorSpec::pointlike("B", 0.7, 1.0, vec![(5, 1.0)], 6, 1.0)?,
        ),
        "pointlike" => (
            DetectorSpec::pointlike("A", 1.1, 1.0, (1..=4).map(|s| (s, 1.0)).collect(), 3, 1.0)?,
            DetectorSpec::pointlike("B", 0.7, 1.0, vec![(3, 1.0)], 4, 1.0)?,
        ),
        other => return Err(DetectorError::InvalidDetector { label: other.into(), reason: "unknown tripartite preset".into() }),
    };
    Ok((model, TripartiteSetup { kick, a, b, rho_a: ground(), rho_b: plus(), observable_b: sigma_z(), max_order: 4 }))
}

/// Named detector pairs on a massless 64-site lattice:
/// `(name, A, B, ρA, ρB)`.
pub fn pair_presets() -> Vec<(String, DetectorSpec, DetectorSpec, CMat, CMat)> {
    let rho_x = plus();
    let rho_y = (linalg::identity(2) + linalg::pauli_y()) * cr(0.5);
    let tilted = {
        let v = linalg::CVec::from_vec(vec![cr(0.8), c(0.36, 0.48)]);
        linalg::ket_bra(&v)
    };
    let mk = |l: &str, w: f64, st: (i64, i64), si: (i64, i64)| DetectorSpec::boxed(l, w, 1.0, st, si, 1.0).expect("valid preset");
    let gauss = |l: &str, w: f64, st: (i64, i64), center: f64, sigma: f64| {
        DetectorSpec::new(l, w, 1.0, (st.0..=st.1).map(|s| (s, 1.0)).collect(), DetectorSpec::gaussian_smearing(center, sigma, 1.0))
            .expect("valid preset")
    };
    let point = |l: &str, w: f64, st: (i64, i64), x: i64| {
        DetectorSpec::pointlike(l, w, 1.0, (st.0..=st.1).map(|s| (s, 1.0)).collect(), x, 1.0).expect("valid preset")
    };
    vec![
        ("spacelike_boxes".into(), mk("A", 1.0, (0, 2), (0, 2)), mk("B", 1.3, (0, 2), (10, 12)), rho_x.clone(), rho_x.clone()),
        ("timelike_boxes".into(), mk("A", 1.0, (0, 2), (0, 2)), mk("B", 1.3, (6, 8), (1, 3)), rho_x.clone(), rho_x.clone()),
        ("timelike_points".into(), point("A", 0.9, (0, 3), 0), point("B", 0.4, (5, 7), 2), rho_x.clone(), rho_y.clone()),
        ("lightlike_edge".into(), point("A", 1.2, (0, 0), 0), point("B", 0.8, (4, 4), 4), rho_x.clone(), rho_x.clone()),
        ("gaussian_near".into(), gauss("A", 1.0, (0, 2), 0.0, 1.0), gauss("B", 1.5, (0, 2), 9.0, 1.0), rho_x.clone(), rho_y.clone()),
        ("gaussian_far".into(), gauss("A", 1.0, (0, 2), 0.0, 1.0), gauss("B", 1.5, (0, 2), 14.0, 1.0), rho_x.clone(), rho_y.clone()),
        ("overlapping".into(), mk("A", 0.6, (0, 4), (0, 4)), mk("B", 1.9, (2, 6), (2, 6)), tilted.clone(), rho_x.clone()),
        ("b_before_a".into(), mk("A", 1.0, (8, 9), (0, 1)), mk("B", 1.3, (0, 1), (0, 1)), rho_x.clone(), tilted.clone()),
        ("ground_a".into(), mk("A", 1.0, (0, 2), (0, 2)), mk("B", 1.3, (6, 8), (1, 3)), ground(), rho_x.clone()),
        ("wide_timelike".into(), mk("A", 2.1, (0, 1), (-3, 3)), mk("B", 0.3, (9, 12), (-2, 2)), tilted, rho_y),
    ]
}
