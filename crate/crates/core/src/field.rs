//! Free real scalar field on a periodic 1+1D lattice.
//!
//! Points are lattice cells `(step, site)` with `t = step * dt`, `x = site * a`.
//! For `m = 0` the field follows the Courant-1 leapfrog recursion
//! `φ(n+1,x) + φ(n-1,x) = φ(n,x+1) + φ(n,x-1)`, whose commutator is exactly
//! supported in the discrete cone. Per-mode phases are `θ_j = |k_j a|` and the
//! effective frequencies `Ω_j = sin θ_j / dt`. Modes with `sin θ_j = 0`
//! (`j = 0` and `j = N/2`) carry no normalisable vacuum; their symmetric part
//! is dropped and their c-number commutator is kept.
//!
//! Leapfrog is unstable at Courant number one for `m > 0`; massive fields use
//! continuum-time mode functions `e^{-i ω_k t}` with the lattice dispersion,
//! whose commutator leaks a small tail outside the cone.

use crate::causal::Region;
use crate::linalg::{self, cr, CMat, CVec, C64};
use crate::qops::{self, LocalOperator, ProductSpace, QopsError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use thiserror::Error;

pub type Cell = (i64, i64);

pub const MAX_FOCK_MODES: usize = 3;
pub const MAX_FOCK_CUTOFF: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("invalid field model: {0}")]
    InvalidModel(String),
    #[error("massless zero mode is infrared divergent; set `field.drop_zero_mode`")]
    IrDivergent,
    #[error("step separation {steps} outside the simulated window of {window} steps")]
    OutOfWindow { steps: i64, window: i64 },
    #[error("truncation too large: {modes} modes, cutoff {cutoff}")]
    TruncationTooLarge { modes: usize, cutoff: usize },
    #[error("mode {0} has no normalisable vacuum or is not a valid index")]
    InvalidMode(i64),
    #[error("smearing weight at {cell:?} lies outside its declared support")]
    OutsideSupport { cell: Cell },
    #[error("smearings span {span} steps; cones wrap around a ring of {sites} sites")]
    WrapAround { span: i64, sites: usize },
    #[error(transparent)]
    Qops(#[from] QopsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    Leapfrog,
    ContinuumTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub j: i64,
    pub k: f64,
    /// Continuum-time lattice dispersion `sqrt(m² + (2/a)² sin²(ka/2))`.
    pub omega: f64,
    /// Phase advanced per time step.
    pub phase: f64,
    /// Effective frequency entering the normalisation.
    pub freq: f64,
    pub marginal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldModel {
    pub mass: f64,
    pub sites: usize,
    pub spacing: f64,
    pub dt: f64,
    pub drop_zero_mode: bool,
    /// Largest step separation that kernels may be evaluated at.
    pub window: i64,
    pub dynamics: Dynamics,
    modes: Vec<Mode>,
}

impl FieldModel {
    pub fn new(mass: f64, sites: usize, spacing: f64) -> Result<Self, FieldError> {
        FieldModel::with_options(mass, sites, spacing, true, sites as i64)
    }

    pub fn with_options(mass: f64, sites: usize, spacing: f64, drop_zero_mode: bool, window: i64) -> Result<Self, FieldError> {
        if !(mass >= 0.0) || !mass.is_finite() {
            return Err(FieldError::InvalidModel(format!("mass {mass}")));
        }
        if sites < 8 {
            return Err(FieldError::InvalidModel(format!("need at least 8 sites, got {sites}")));
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(FieldError::InvalidModel(format!("spacing {spacing}")));
        }
        if window < 0 {
            return Err(FieldError::InvalidModel("negative window".into()));
        }
        if mass == 0.0 && !drop_zero_mode {
            return Err(FieldError::IrDivergent);
        }
        let dt = spacing;
        let dynamics = if mass == 0.0 { Dynamics::Leapfrog } else { Dynamics::ContinuumTime };
        let n = sites as i64;
        let modes = (0..n)
            .map(|idx| {
                let j = if idx <= n / 2 { idx } else { idx - n };
                let k = 2.0 * PI * j as f64 / (n as f64 * spacing);
                let omega = (mass * mass + (2.0 / spacing * (k * spacing / 2.0).sin()).powi(2)).sqrt();
                match dynamics {
                    Dynamics::Leapfrog => {
                        let theta = (k * spacing).abs();
                        let marginal = j == 0 || 2 * j == n;
                        let freq = if marginal { 0.0 } else { theta.sin() / dt };
                        Mode { j, k, omega, phase: theta, freq, marginal }
                    }
                    Dynamics::ContinuumTime => Mode { j, k, omega, phase: omega * dt, freq: omega, marginal: omega == 0.0 },
                }
            })
            .collect();
        Ok(FieldModel { mass, sites, spacing, dt, drop_zero_mode, window, dynamics, modes })
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn mode(&self, j: i64) -> Option<&Mode> {
        self.modes.iter().find(|m| m.j == j)
    }

    /// Cell-pair measure `dt · a` of the spacetime lattice.
    pub fn cell_volume(&self) -> f64 {
        self.dt * self.spacing
    }

    fn norm(&self) -> f64 {
        1.0 / (self.sites as f64 * self.spacing)
    }

    fn check_window(&self, n: i64) -> Result<(), FieldError> {
        if n.abs() > self.window {
            return Err(FieldError::OutOfWindow { steps: n, window: self.window });
        }
        Ok(())
    }

    /// `sin(n φ)/f`, with its limit `n dt (cos φ)^{n-1}` for marginal modes.
    fn propagator(&self, m: &Mode, n: i64) -> f64 {
        if m.marginal {
            let sign = if m.phase.cos() < 0.0 && (n - 1).rem_euclid(2) == 1 { -1.0 } else { 1.0 };
            n as f64 * self.dt * sign
        } else {
            (n as f64 * m.phase).sin() / m.freq
        }
    }

    fn plane(&self, m: &Mode, d: i64) -> C64 {
        let arg = 2.0 * PI * (m.j * d).rem_euclid(self.sites as i64) as f64 / self.sites as f64;
        C64::from_polar(1.0, arg)
    }

    /// Mode sum for `W(n, d)` restricted to an optional subset of the running
    /// mode indices.
    fn wightman_sum(&self, n: i64, d: i64, subset: Option<&[i64]>) -> C64 {
        let mut s = C64::new(0.0, 0.0);
        for m in &self.modes {
            if subset.is_some_and(|sub| !sub.contains(&m.j)) {
                continue;
            }
            let term = if m.marginal {
                C64::new(0.0, -0.5 * self.propagator(m, n))
            } else {
                C64::from_polar(1.0 / (2.0 * m.freq), -(n as f64) * m.phase)
            };
            s += term * self.plane(m, d);
        }
        s * cr(self.norm())
    }

    /// Vacuum Wightman function `<φ(x) φ(y)>`.
    pub fn wightman(&self, x: Cell, y: Cell) -> Result<C64, FieldError> {
        let n = x.0 - y.0;
        self.check_window(n)?;
        Ok(self.wightman_sum(n, x.1 - y.1, None))
    }

    /// Wightman function restricted to the running modes `subset`.
    pub fn wightman_modes(&self, x: Cell, y: Cell, subset: &[i64]) -> Result<C64, FieldError> {
        let n = x.0 - y.0;
        self.check_window(n)?;
        Ok(self.wightman_sum(n, x.1 - y.1, Some(subset)))
    }

    fn commutator_sum(&self, n: i64, d: i64) -> f64 {
        // Imaginary part of the mode sum: -(1/Na) Σ prop_j cos(k_j d).
        let mut s = 0.0;
        for m in &self.modes {
            s += self.propagator(m, n) * self.plane(m, d).re;
        }
        -s * self.norm()
    }

    /// `<[φ(x), φ(y)]>`, purely imaginary.
    pub fn commutator(&self, x: Cell, y: Cell) -> Result<C64, FieldError> {
        let n = x.0 - y.0;
        self.check_window(n)?;
        let d = x.1 - y.1;
        // Evaluate on the canonical half and use antisymmetry exactly.
        let v = if n > 0 || (n == 0 && self.periodic(d) >= 0) { self.commutator_sum(n, d) } else { -self.commutator_sum(-n, -d) };
        Ok(C64::new(0.0, v))
    }

    /// `-i θ(t_x - t_y) <[φ(x), φ(y)]>` with `θ(0) = 0`.
    pub fn retarded_green(&self, x: Cell, y: Cell) -> Result<C64, FieldError> {
        if x.0 <= y.0 {
            self.check_window(x.0 - y.0)?;
            return Ok(C64::new(0.0, 0.0));
        }
        Ok(C64::new(0.0, -1.0) * self.commutator(x, y)?)
    }

    /// Signed periodic site offset in `(-N/2, N/2]`.
    pub fn periodic(&self, d: i64) -> i64 {
        let n = self.sites as i64;
        let r = d.rem_euclid(n);
        if r > n / 2 {
            r - n
        } else {
            r
        }
    }

    /// Whether two cells lie strictly outside each other's discrete cone.
    pub fn outside_cone(&self, x: Cell, y: Cell) -> bool {
        self.periodic(x.1 - y.1).abs() > (x.0 - y.0).abs()
    }

    /// Largest `|Δ|` strictly outside the cone within the window.
    pub fn cone_tail(&self) -> f64 {
        let n = self.sites as i64;
        (0..=self.window)
            .into_par_iter()
            .map(|s| {
                (0..n)
                    .filter(|&d| self.periodic(d).abs() > s)
                    .map(|d| self.commutator_sum(s, d).abs())
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Reject smearing families whose step span lets cones wrap.
    pub fn check_no_wrap(&self, fs: &[&SmearingFn]) -> Result<(), FieldError> {
        let steps: Vec<i64> = fs.iter().flat_map(|f| f.samples.keys().map(|c| c.0)).collect();
        if let (Some(lo), Some(hi)) = (steps.iter().min(), steps.iter().max()) {
            let span = hi - lo;
            if 2 * span >= self.sites as i64 {
                return Err(FieldError::WrapAround { span, sites: self.sites });
            }
            self.check_window(span)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Wightman,
    Commutator,
    Retarded,
}

/// Translation-invariant kernel tables over the whole window.
#[derive(Debug, Clone)]
pub struct TwoPointKernel {
    pub model: FieldModel,
    /// `W(n, d)` for `n in 0..=window`, `d in 0..N`.
    wightman: Vec<C64>,
    /// `Im Δ(n, d)` on the same grid.
    commutator: Vec<f64>,
}

impl TwoPointKernel {
    pub fn build(model: &FieldModel) -> Self {
        let n = model.sites as i64;
        let rows: Vec<(Vec<C64>, Vec<f64>)> = (0..=model.window)
            .into_par_iter()
            .map(|s| {
                let w = (0..n).map(|d| model.wightman_sum(s, d, None)).collect();
                let c = (0..n).map(|d| model.commutator_sum(s, d)).collect();
                (w, c)
            })
            .collect();
        let mut wightman = Vec::with_capacity(rows.len() * model.sites);
        let mut commutator = Vec::with_capacity(rows.len() * model.sites);
        for (w, c) in rows {
            wightman.extend(w);
            commutator.extend(c);
        }
        TwoPointKernel { model: model.clone(), wightman, commutator }
    }

    fn idx(&self, n: i64, d: i64) -> usize {
        n as usize * self.model.sites + d.rem_euclid(self.model.sites as i64) as usize
    }

    pub fn wightman(&self, x: Cell, y: Cell) -> Result<C64, FieldError> {
        let n = x.0 - y.0;
        self.model.check_window(n)?;
        let d = x.1 - y.1;
        Ok(if n >= 0 { self.wightman[self.idx(n, d)] } else { self.wightman[self.idx(-n, -d)].conj() })
    }

    pub fn commutator(&self, x: Cell, y: Cell) -> Result<C64, FieldError> {
        let n = x.0 - y.0;
        self.model.check_window(n)?;
        let d = x.1 - y.1;
        let v = if n > 0 || (n == 0 && self.model.periodic(d) >= 0) {
            self.commutator[self.idx(n, d)]
        } else {
            -self.commutator[self.idx(-n, -d)]
        };
        Ok(C64::new(0.0, v))
    }

    pub fn retarded(&self, x: Cell, y: Cell) -> Result<C64, FieldError> {
        if x.0 <= y.0 {
            self.model.check_window(x.0 - y.0)?;
            return Ok(C64::new(0.0, 0.0));
        }
        Ok(C64::new(0.0, -1.0) * self.commutator(x, y)?)
    }

    pub fn eval(&self, kind: KernelKind, x: Cell, y: Cell) -> Result<C64, FieldError> {
        match kind {
            KernelKind::Wightman => self.wightman(x, y),
            KernelKind::Commutator => self.commutator(x, y),
            KernelKind::Retarded => self.retarded(x, y),
        }
    }

    /// `Σ dV dV' f(x) g(y) K(x, y)`.
    pub fn smeared(&self, kind: KernelKind, f: &SmearingFn, g: &SmearingFn) -> Result<C64, FieldError> {
        let dv = self.model.cell_volume();
        let mut s = C64::new(0.0, 0.0);
        for (&x, &fx) in &f.samples {
            for (&y, &gy) in &g.samples {
                s += self.eval(kind, x, y)? * cr(fx * gy);
            }
        }
        Ok(s * cr(dv * dv))
    }

    pub fn smeared_commutator(&self, f: &SmearingFn, g: &SmearingFn) -> Result<C64, FieldError> {
        self.smeared(KernelKind::Commutator, f, g)
    }

    /// CSV grid `step,site,re_w,im_w,im_commutator,re_retarded` over the
    /// window, sites in `(-N/2, N/2]`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "site", "re_w", "im_w", "im_commutator", "re_retarded"]).expect("in-memory write");
        let n = self.model.sites as i64;
        for s in 0..=self.model.window {
            for d in (-(n - 1) / 2 - (1 - n % 2))..=(n / 2) {
                let wv = self.wightman((s, d), (0, 0)).expect("inside window");
                let cv = self.commutator((s, d), (0, 0)).expect("inside window");
                let gv = self.retarded((s, d), (0, 0)).expect("inside window");
                w.write_record([
                    s.to_string(),
                    d.to_string(),
                    crate::cli::fmt17(wv.re),
                    crate::cli::fmt17(wv.im),
                    crate::cli::fmt17(cv.im),
                    crate::cli::fmt17(gv.re),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmearingFn {
    pub samples: BTreeMap<Cell, f64>,
    pub support: Region,
    /// Weight discarded by truncating a non-compact profile.
    pub truncation_mass: f64,
}

impl SmearingFn {
    pub fn new(samples: BTreeMap<Cell, f64>, support: Region) -> Result<Self, FieldError> {
        let f = SmearingFn { samples, support, truncation_mass: 0.0 };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        for (&c, &v) in &self.samples {
            if v != 0.0 && !self.support.contains(&crate::causal::Point::cell(c.0, c.1)) {
                return Err(FieldError::OutsideSupport { cell: c });
            }
        }
        Ok(())
    }

    /// Constant `height` on `steps x sites` (inclusive ranges).
    pub fn boxed(label: &str, steps: (i64, i64), sites: (i64, i64), height: f64) -> Result<Self, FieldError> {
        let support = Region::cell_block(label, steps, sites).map_err(|e| FieldError::InvalidModel(e.to_string()))?;
        let mut samples = BTreeMap::new();
        for s in steps.0..=steps.1 {
            for x in sites.0..=sites.1 {
                samples.insert((s, x), height);
            }
        }
        SmearingFn::new(samples, support)
    }

    /// Product `χ(step) F(site)`.
    pub fn product(label: &str, chi: &[(i64, f64)], f: &[(i64, f64)]) -> Result<Self, FieldError> {
        let mut samples = BTreeMap::new();
        for &(s, c) in chi {
            for &(x, v) in f {
                if c * v != 0.0 {
                    samples.insert((s, x), c * v);
                }
            }
        }
        let support = Region::cells(label, samples.keys().copied()).map_err(|e| FieldError::InvalidModel(e.to_string()))?;
        SmearingFn::new(samples, support)
    }

    /// Unit-height Gaussian truncated at six standard deviations. The
    /// discarded weight, relative to a window twice as wide, is recorded.
    pub fn gaussian(label: &str, center: (f64, f64), sigma: (f64, f64)) -> Result<Self, FieldError> {
        if !(sigma.0 > 0.0 && sigma.1 > 0.0) {
            return Err(FieldError::InvalidModel("gaussian widths must be positive".into()));
        }
        let g = |s: i64, x: i64| {
            let a = (s as f64 - center.0) / sigma.0;
            let b = (x as f64 - center.1) / sigma.1;
            (-(a * a + b * b) / 2.0).exp()
        };
        let range = |c: f64, w: f64, k: f64| ((c - k * w).ceil() as i64, (c + k * w).floor() as i64);
        let (s6, x6) = (range(center.0, sigma.0, 6.0), range(center.1, sigma.1, 6.0));
        let (s12, x12) = (range(center.0, sigma.0, 12.0), range(center.1, sigma.1, 12.0));
        let mut samples = BTreeMap::new();
        let (mut kept, mut total) = (0.0, 0.0);
        for s in s12.0..=s12.1 {
            for x in x12.0..=x12.1 {
                let v = g(s, x);
                total += v;
                let inside = ((s as f64 - center.0) / sigma.0).abs() <= 6.0 && ((x as f64 - center.1) / sigma.1).abs() <= 6.0;
                if inside {
                    kept += v;
                    samples.insert((s, x), v);
                }
            }
        }
        let support = Region::cell_block(label, s6, x6).map_err(|e| FieldError::InvalidModel(e.to_string()))?;
        let mut f = SmearingFn::new(samples, support)?;
        f.truncation_mass = (total - kept) / total;
        Ok(f)
    }

    /// Samples at one step, as `(site, weight)`.
    pub fn slice(&self, step: i64) -> Vec<(i64, f64)> {
        self.samples.iter().filter(|(c, _)| c.0 == step).map(|(c, &v)| (c.1, v)).collect()
    }

    pub fn steps(&self) -> Vec<i64> {
        let mut s: Vec<i64> = self.samples.keys().map(|c| c.0).collect();
        s.dedup();
        s
    }
}

/// Truncated bosonic modes labelled `labels`, each with occupations
/// `0..=cutoff`. Returns the space and the embedded annihilation operators.
pub fn truncated_modes<S: AsRef<str>>(labels: &[S], cutoff: usize) -> Result<(ProductSpace, Vec<LocalOperator>), QopsError> {
    let f: Vec<(&str, usize)> = labels.iter().map(|l| (l.as_ref(), cutoff + 1)).collect();
    let space = ProductSpace::new(&f)?;
    let a = linalg::annihilation(cutoff);
    let ops = labels.iter().map(|l| qops::embed(&a, &[l.as_ref()], &space)).collect::<Result<_, _>>()?;
    Ok((space, ops))
}

/// Truncated Fock representation of a few standing-wave modes. Mode index
/// `j > 0` is `√2 cos(k_j x)`, `j < 0` is `√2 sin(k_|j| x)`; the pair
/// `{j, -j}` spans the running modes `±k_j`.
#[derive(Debug, Clone)]
pub struct FockBackend {
    pub model: FieldModel,
    pub modes: Vec<i64>,
    pub cutoff: usize,
    pub space: ProductSpace,
    pub annihilators: Vec<LocalOperator>,
}

impl FockBackend {
    pub fn new(model: &FieldModel, modes: &[i64], cutoff: usize) -> Result<Self, FieldError> {
        if modes.len() > MAX_FOCK_MODES || cutoff > MAX_FOCK_CUTOFF || modes.is_empty() || cutoff == 0 {
            return Err(FieldError::TruncationTooLarge { modes: modes.len(), cutoff });
        }
        let n = model.sites as i64;
        for (i, &j) in modes.iter().enumerate() {
            let valid = j.abs() <= n / 2 && !(j < 0 && (j == 0 || -2 * j == n)) && !modes[..i].contains(&j);
            let m = model.mode(j.abs()).ok_or(FieldError::InvalidMode(j))?;
            if !valid || m.marginal {
                return Err(FieldError::InvalidMode(j));
            }
        }
        let labels: Vec<String> = modes.iter().map(|j| format!("m{j}")).collect();
        let (space, annihilators) = truncated_modes(&labels, cutoff)?;
        Ok(FockBackend { model: model.clone(), modes: modes.to_vec(), cutoff, space, annihilators })
    }

    pub fn vacuum(&self) -> CVec {
        linalg::basis_vec(self.space.dim(), 0)
    }

    fn profile(&self, j: i64, x: i64) -> f64 {
        let n = self.model.sites as i64;
        let arg = 2.0 * PI * (j.abs() * x).rem_euclid(n) as f64 / n as f64;
        if j == 0 || 2 * j == n {
            arg.cos()
        } else if j > 0 {
            2f64.sqrt() * arg.cos()
        } else {
            2f64.sqrt() * arg.sin()
        }
    }

    /// Coefficient of `a_m` in `φ(f)`.
    fn coefficient(&self, m: usize, samples: &BTreeMap<Cell, f64>, weight: f64) -> C64 {
        let j = self.modes[m];
        let mode = self.model.mode(j.abs()).expect("validated mode");
        let norm = (2.0 * mode.freq * self.model.sites as f64 * self.model.spacing).sqrt();
        let mut s = C64::new(0.0, 0.0);
        for (&(step, x), &v) in samples {
            s += C64::from_polar(v * self.profile(j, x), -(step as f64) * mode.phase);
        }
        s * cr(weight / norm)
    }

    fn assemble(&self, coeffs: &[C64]) -> CMat {
        let n = self.space.dim();
        let mut out = CMat::zeros(n, n);
        for (a, &c) in self.annihilators.iter().zip(coeffs) {
            out += &a.matrix * c + a.matrix.adjoint() * c.conj();
        }
        out
    }

    /// Vacuum two-point function `<φ(x) φ(y)>` of the truncated modes.
    pub fn two_point(&self, x: Cell, y: Cell) -> C64 {
        let one = |c: Cell| -> BTreeMap<Cell, f64> { [(c, 1.0)].into_iter().collect() };
        let (sx, sy) = (one(x), one(y));
        (0..self.modes.len()).map(|m| self.coefficient(m, &sx, 1.0) * self.coefficient(m, &sy, 1.0).conj()).sum()
    }

    /// Point field `φ(step, site)`.
    pub fn field_at(&self, cell: Cell) -> CMat {
        let samples: BTreeMap<Cell, f64> = [(cell, 1.0)].into_iter().collect();
        let coeffs: Vec<C64> = (0..self.modes.len()).map(|m| self.coefficient(m, &samples, 1.0)).collect();
        self.assemble(&coeffs)
    }

    /// `Σ dV f(x) φ(x)`.
    pub fn smeared(&self, f: &SmearingFn) -> LocalOperator {
        let dv = self.model.cell_volume();
        let coeffs: Vec<C64> = (0..self.modes.len()).map(|m| self.coefficient(m, &f.samples, dv)).collect();
        LocalOperator { space: self.space.clone(), matrix: self.assemble(&coeffs), region: Some(f.support.clone()), support: self.space.labels() }
    }

    /// `Σ_x a F(x) φ(step, x)` for a spatial profile at one step.
    pub fn smeared_at_step(&self, step: i64, profile: &[(i64, f64)]) -> CMat {
        let samples: BTreeMap<Cell, f64> = profile.iter().map(|&(x, v)| ((step, x), v)).collect();
        let coeffs: Vec<C64> = (0..self.modes.len()).map(|m| self.coefficient(m, &samples, self.model.spacing)).collect();
        self.assemble(&coeffs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn massless(n: usize) -> FieldModel {
        FieldModel::new(0.0, n, 1.0).unwrap()
    }

    #[test]
    fn model_validation() {
        assert!(FieldModel::new(0.0, 4, 1.0).is_err());
        assert!(FieldModel::new(-1.0, 16, 1.0).is_err());
        assert!(FieldModel::new(0.0, 16, 0.0).is_err());
        assert!(matches!(FieldModel::with_options(0.0, 16, 1.0, false, 16), Err(FieldError::IrDivergent)));
        assert!(FieldModel::with_options(0.5, 16, 1.0, false, 16).is_ok());
        assert!(matches!(massless(16).wightman((40, 0), (0, 0)), Err(FieldError::OutOfWindow { .. })));
    }

    #[test]
    fn dispersion_table() {
        let f = FieldModel::new(0.3, 16, 0.5).unwrap();
        for m in f.modes() {
            let expect = (0.09 + (4.0 * (m.k * 0.25).sin().powi(2)) / 0.25).sqrt();
            assert!((m.omega - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn equal_point_wightman_real_positive() {
        for f in [massless(32), FieldModel::new(0.5, 32, 1.0).unwrap()] {
            let w = f.wightman((3, 2), (3, 2)).unwrap();
            assert!(w.re > 0.0 && w.im.abs() < 1e-14 && w.re.is_finite());
        }
    }

    #[test]
    fn commutator_examples() {
        let f = massless(64);
        assert_eq!(f.commutator((4, 4), (4, 4)).unwrap(), C64::new(0.0, 0.0));
        assert!(f.commutator((1, 5), (0, 0)).unwrap().norm() < 1e-12);
        assert!(f.commutator((5, 0), (0, 0)).unwrap().norm() > 0.1);
    }

    #[test]
    fn leapfrog_commutator_is_sublattice_indicator() {
        // Independent oracle: U_{n-1}(cos k) = Σ e^{imk} over m = -(n-1), -(n-3), …, n-1,
        // so Δ(n, d) = -i dt on |d| <= n-1 with d ≡ n-1 (mod 2), zero elsewhere.
        let f = massless(64);
        for n in 1..12i64 {
            for d in -20..=20i64 {
                let expect = if d.abs() < n && (d - (n - 1)).rem_euclid(2) == 0 { -1.0 } else { 0.0 };
                assert!((f.commutator((n, d), (0, 0)).unwrap().im - expect).abs() < 1e-12, "n={n} d={d}");
            }
        }
    }

    #[test]
    fn retarded_examples() {
        let f = massless(64);
        assert_eq!(f.retarded_green((0, 0), (3, 0)).unwrap(), C64::new(0.0, 0.0));
        let x = (6, 3);
        let g = f.retarded_green(x, (0, 0)).unwrap();
        let c = f.commutator(x, (0, 0)).unwrap();
        assert!((g - C64::new(0.0, -1.0) * c).norm() < 1e-15);
    }

    #[test]
    fn retarded_sublattice_average_matches_continuum() {
        // Massless continuum value with this sign convention is -1/2 inside the cone.
        let f = massless(256);
        for (n, d) in [(40i64, 0i64), (40, 17), (80, -50), (120, 3)] {
            let avg = (f.retarded_green((n, d), (0, 0)).unwrap() + f.retarded_green((n, d + 1), (0, 0)).unwrap()) / cr(2.0);
            assert!((avg.re + 0.5).abs() < 0.05 && avg.im.abs() < 1e-12);
        }
    }

    #[test]
    fn massive_tail_is_small_but_reported() {
        let f = FieldModel::with_options(0.5, 64, 1.0, true, 16).unwrap();
        let tail = f.cone_tail();
        assert!(tail > 0.0 && tail < 0.1);
    }

    #[test]
    fn kernel_cache_matches_direct() {
        for f in [FieldModel::with_options(0.0, 16, 1.0, true, 10).unwrap(), FieldModel::with_options(0.7, 16, 1.0, true, 10).unwrap()] {
            let k = TwoPointKernel::build(&f);
            for (x, y) in [((3, 2), (0, 5)), ((0, 1), (7, -3)), ((2, 2), (2, 9)), ((5, 0), (5, 0))] {
                assert!((k.wightman(x, y).unwrap() - f.wightman(x, y).unwrap()).norm() < 1e-14);
                assert!((k.commutator(x, y).unwrap() - f.commutator(x, y).unwrap()).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn smeared_commutator_examples() {
        let f = massless(64);
        let k = TwoPointKernel::build(&f);
        let a = SmearingFn::boxed("A", (0, 2), (0, 2), 1.0).unwrap();
        let b = SmearingFn::boxed("B", (0, 2), (10, 12), 1.0).unwrap();
        assert!(k.smeared_commutator(&a, &b).unwrap().norm() < 1e-12);
        assert!(k.smeared_commutator(&a, &a).unwrap().norm() < 1e-12);
        let c = SmearingFn::boxed("C", (8, 9), (1, 2), 1.0).unwrap();
        assert!(k.smeared_commutator(&c, &a).unwrap().norm() > 1e-3);
    }

    #[test]
    fn gaussian_truncation_reported() {
        let g = SmearingFn::gaussian("G", (10.0, 0.0), (1.5, 2.0)).unwrap();
        assert!(g.truncation_mass > 0.0 && g.truncation_mass < 1e-7);
        assert!(g.samples.keys().all(|c| (c.0 - 10).abs() <= 9 && c.1.abs() <= 12));
    }

    #[test]
    fn smearing_support_enforced() {
        let mut s = BTreeMap::new();
        s.insert((0, 5), 1.0);
        let r = Region::cells("R", [(0, 0)]).unwrap();
        assert!(matches!(SmearingFn::new(s, r), Err(FieldError::OutsideSupport { .. })));
    }

    #[test]
    fn wrap_detection() {
        let f = FieldModel::with_options(0.0, 16, 1.0, true, 40).unwrap();
        let a = SmearingFn::boxed("A", (0, 0), (0, 0), 1.0).unwrap();
        let b = SmearingFn::boxed("B", (9, 9), (0, 0), 1.0).unwrap();
        assert!(matches!(f.check_no_wrap(&[&a, &b]), Err(FieldError::WrapAround { .. })));
    }

    #[test]
    fn fock_ladder_basics() {
        let f = massless(16);
        let fb = FockBackend::new(&f, &[1, -1], 3).unwrap();
        let vac = fb.vacuum();
        for a in &fb.annihilators {
            assert!((&a.matrix * &vac).norm() < 1e-15);
        }
        assert!(matches!(FockBackend::new(&f, &[1, 2, 3, 4], 2), Err(FieldError::TruncationTooLarge { .. })));
        assert!(matches!(FockBackend::new(&f, &[1], 5), Err(FieldError::TruncationTooLarge { .. })));
        assert!(matches!(FockBackend::new(&f, &[0], 2), Err(FieldError::InvalidMode(0))));
        assert!(matches!(FockBackend::new(&f, &[8], 2), Err(FieldError::InvalidMode(8))));
        assert!(matches!(FockBackend::new(&f, &[1, 1], 2), Err(FieldError::InvalidMode(1))));
    }

    #[test]
    fn fock_two_point_matches_restricted_wightman() {
        let f = massless(16);
        let fb = FockBackend::new(&f, &[2, -2], 2).unwrap();
        let k = [2i64, -2];
        let vac = fb.vacuum();
        for (x, y) in [((0, 0), (3, 1)), ((5, 2), (1, -4)), ((2, 7), (2, 3))] {
            let val = (vac.adjoint() * fb.field_at(x) * fb.field_at(y) * &vac)[(0, 0)];
            assert!((val - f.wightman_modes(x, y, &k).unwrap()).norm() < 1e-12);
        }
        let a = SmearingFn::boxed("A", (0, 1), (0, 1), 1.0).unwrap();
        let b = SmearingFn::gaussian("B", (3.0, 2.0), (0.7, 0.7)).unwrap();
        let (pa, pb) = (fb.smeared(&a), fb.smeared(&b));
        let val = (vac.adjoint() * &pa.matrix * &pb.matrix * &vac)[(0, 0)];
        let dv = f.cell_volume();
        let mut expect = C64::new(0.0, 0.0);
        for (&x, &fx) in &a.samples {
            for (&y, &gy) in &b.samples {
                expect += f.wightman_modes(x, y, &k).unwrap() * cr(fx * gy * dv * dv);
            }
        }
        assert!((val - expect).norm() < 1e-8);
    }

    #[test]
    fn fock_commutator_is_c_number_below_cutoff() {
        let f = massless(16);
        let fb = FockBackend::new(&f, &[1, -1, 3], 4).unwrap();
        let a = SmearingFn::boxed("A", (0, 0), (0, 2), 1.0).unwrap();
        let b = SmearingFn::boxed("B", (2, 3), (1, 1), 1.0).unwrap();
        let c = linalg::commutator(&fb.smeared(&a).matrix, &fb.smeared(&b).matrix);
        // Compare on states with at most one quantum per mode, away from the cutoff edge.
        let low: Vec<usize> = (0..fb.space.dim()).filter(|&i| fb.space.digits(i).iter().all(|&d| d <= 1)).collect();
        let z = c[(0, 0)];
        for &i in &low {
            for &j in &low {
                let expect = if i == j { z } else { C64::new(0.0, 0.0) };
                assert!((c[(i, j)] - expect).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn fock_equal_time_fields_commute_exactly() {
        let f = massless(16);
        let fb = FockBackend::new(&f, &[1, -1], 2).unwrap();
        let c = linalg::commutator(&fb.field_at((3, 0)), &fb.field_at((3, 5)));
        assert!(linalg::max_abs(&c) < 1e-13);
    }
}
