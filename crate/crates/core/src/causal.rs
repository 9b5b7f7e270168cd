//! Regions of 1+1D Minkowski spacetime (c = 1), their causal futures and
//! pasts, the precedence relation between regions and its closure.
//!
//! Regions are closed: lightlike contact counts as causal contact. Lattice
//! regions are finite sets of `(step, site)` cells whose cones have slope one
//! site per step.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

const EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CausalError {
    #[error("invalid region `{label}`: {reason}")]
    InvalidRegion { label: String, reason: String },
    #[error("regions `{a}` and `{b}` precede each other after closure")]
    CycleError { a: String, b: String },
    #[error("empty region list")]
    Empty,
    #[error("linear extensions enumerated only up to {max} regions, got {got}")]
    TooManyRegions { max: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub t: f64,
    pub x: f64,
}

impl Point {
    pub fn new(t: f64, x: f64) -> Self {
        Point { t, x }
    }

    pub fn cell(step: i64, site: i64) -> Self {
        Point { t: step as f64, x: site as f64 }
    }

    /// `q` lies in the closed causal future of `self`.
    pub fn precedes_point(&self, q: &Point) -> bool {
        q.t - self.t >= (q.x - self.x).abs() - EPS
    }

    pub fn causally_related(&self, q: &Point) -> bool {
        self.precedes_point(q) || q.precedes_point(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Rect { t0: f64, t1: f64, x0: f64, x1: f64 },
    Cells(BTreeSet<(i64, i64)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub label: String,
    pub kind: RegionKind,
}

/// Closed axis-aligned box, possibly degenerate (a lattice cell).
#[derive(Debug, Clone, Copy)]
struct Boxed {
    t0: f64,
    t1: f64,
    x0: f64,
    x1: f64,
}

fn interval_gap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (b0 - a1).max(a0 - b1).max(0.0)
}

impl Boxed {
    /// Value of `max (q.t - p.t - |q.x - p.x|)` over `p` in self, `q` in other.
    fn best_margin(&self, other: &Boxed) -> (f64, f64) {
        let gap = interval_gap(self.x0, self.x1, other.x0, other.x1);
        (other.t1 - self.t0 - gap, gap)
    }

    /// Some point of self precedes some distinct point of other.
    fn precedes(&self, other: &Boxed) -> bool {
        let (v, gap) = self.best_margin(other);
        v > EPS || (v.abs() <= EPS && gap > EPS)
    }

    /// Some point of self is causally related to (or equal to) a point of other.
    fn touches(&self, other: &Boxed) -> bool {
        self.best_margin(other).0 >= -EPS || other.best_margin(self).0 >= -EPS
    }

    /// Every point of self precedes every point of other.
    fn wholly_precedes(&self, other: &Boxed) -> bool {
        let far = (other.x1 - self.x0).max(self.x1 - other.x0);
        other.t0 - self.t1 - far >= -EPS
    }

    fn contains(&self, p: &Point) -> bool {
        p.t >= self.t0 - EPS && p.t <= self.t1 + EPS && p.x >= self.x0 - EPS && p.x <= self.x1 + EPS
    }
}

impl Region {
    pub fn rect(label: &str, t0: f64, t1: f64, x0: f64, x1: f64) -> Result<Self, CausalError> {
        let r = Region { label: label.to_string(), kind: RegionKind::Rect { t0, t1, x0, x1 } };
        r.validate()?;
        Ok(r)
    }

    pub fn cells<I: IntoIterator<Item = (i64, i64)>>(label: &str, cells: I) -> Result<Self, CausalError> {
        let r = Region { label: label.to_string(), kind: RegionKind::Cells(cells.into_iter().collect()) };
        r.validate()?;
        Ok(r)
    }

    /// Block of cells `steps x sites` (both inclusive ranges).
    pub fn cell_block(label: &str, steps: (i64, i64), sites: (i64, i64)) -> Result<Self, CausalError> {
        let mut set = BTreeSet::new();
        for s in steps.0..=steps.1 {
            for x in sites.0..=sites.1 {
                set.insert((s, x));
            }
        }
        Region::cells(label, set)
    }

    pub fn validate(&self) -> Result<(), CausalError> {
        let bad = |reason: &str| {
            Err(CausalError::InvalidRegion { label: self.label.clone(), reason: reason.to_string() })
        };
        match &self.kind {
            RegionKind::Rect { t0, t1, x0, x1 } => {
                if ![t0, t1, x0, x1].iter().all(|v| v.is_finite()) {
                    return bad("non-finite bounds");
                }
                if !(t0 < t1) || !(x0 < x1) {
                    return bad("rectangle needs t0 < t1 and x0 < x1");
                }
            }
            RegionKind::Cells(cells) => {
                if cells.is_empty() {
                    return bad("empty cell set");
                }
            }
        }
        Ok(())
    }

    pub fn is_lattice(&self) -> bool {
        matches!(self.kind, RegionKind::Cells(_))
    }

    pub fn cell_set(&self) -> Option<&BTreeSet<(i64, i64)>> {
        match &self.kind {
            RegionKind::Cells(c) => Some(c),
            RegionKind::Rect { .. } => None,
        }
    }

    fn boxes(&self) -> Vec<Boxed> {
        match &self.kind {
            RegionKind::Rect { t0, t1, x0, x1 } => vec![Boxed { t0: *t0, t1: *t1, x0: *x0, x1: *x1 }],
            RegionKind::Cells(cells) => cells
                .iter()
                .map(|&(s, x)| Boxed { t0: s as f64, t1: s as f64, x0: x as f64, x1: x as f64 })
                .collect(),
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        match &self.kind {
            RegionKind::Rect { .. } => self.boxes()[0].contains(p),
            RegionKind::Cells(cells) => {
                p.t.fract() == 0.0 && p.x.fract() == 0.0 && cells.contains(&(p.t as i64, p.x as i64))
            }
        }
    }

    /// Time extent `(t_min, t_max)`.
    pub fn time_span(&self) -> (f64, f64) {
        self.boxes().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| (lo.min(b.t0), hi.max(b.t1)))
    }

    /// Smallest enclosing rectangle `(t0, t1, x0, x1)`.
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        self.boxes().iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), bx| (a.min(bx.t0), b.max(bx.t1), c.min(bx.x0), d.max(bx.x1)),
        )
    }

    /// Union of two regions of the same kind; rectangles are replaced by
    /// their bounding rectangle.
    pub fn union(&self, other: &Region, label: &str) -> Region {
        match (&self.kind, &other.kind) {
            (RegionKind::Cells(a), RegionKind::Cells(b)) => Region {
                label: label.to_string(),
                kind: RegionKind::Cells(a.union(b).copied().collect()),
            },
            _ => {
                let (a0, a1, b0, b1) = self.bounding_box();
                let (c0, c1, d0, d1) = other.bounding_box();
                Region {
                    label: label.to_string(),
                    kind: RegionKind::Rect { t0: a0.min(c0), t1: a1.max(c1), x0: b0.min(d0), x1: b1.max(d1) },
                }
            }
        }
    }

    /// Lattice causal hull: every cell lying on a causal path between two
    /// cells of the region. `None` for continuum rectangles.
    pub fn causal_hull(&self) -> Option<Region> {
        let cells = self.cell_set()?;
        let mut hull = cells.clone();
        let list: Vec<_> = cells.iter().copied().collect();
        for &(s0, x0) in &list {
            for &(s1, x1) in &list {
                let p = Point::cell(s0, x0);
                let q = Point::cell(s1, x1);
                if !p.precedes_point(&q) {
                    continue;
                }
                for s in s0..=s1 {
                    for x in (x0 - (s - s0))..=(x0 + (s - s0)) {
                        let r = Point::cell(s, x);
                        if r.precedes_point(&q) {
                            hull.insert((s, x));
                        }
                    }
                }
            }
        }
        Some(Region { label: format!("hull({})", self.label), kind: RegionKind::Cells(hull) })
    }

    /// Region equals its causal hull. Continuum rectangles of positive
    /// extent are never causally convex.
    pub fn is_causally_convex(&self) -> bool {
        match self.causal_hull() {
            Some(h) => h.cell_set() == self.cell_set(),
            None => false,
        }
    }
}

/// Closed future (or past) cone of a region, usable as a point predicate.
#[derive(Debug, Clone)]
pub struct Cone {
    base: Region,
    future: bool,
}

impl Cone {
    pub fn contains(&self, q: &Point) -> bool {
        let qb = Boxed { t0: q.t, t1: q.t, x0: q.x, x1: q.x };
        self.base.boxes().iter().any(|b| {
            if self.future {
                b.best_margin(&qb).0 >= -EPS
            } else {
                qb.best_margin(b).0 >= -EPS
            }
        })
    }

    pub fn intersects(&self, r: &Region) -> bool {
        self.base.boxes().iter().any(|b| {
            r.boxes().iter().any(|o| if self.future { b.best_margin(o).0 >= -EPS } else { o.best_margin(b).0 >= -EPS })
        })
    }

    /// Lattice cells of the cone inside a finite window (inclusive ranges).
    pub fn cells_within(&self, steps: (i64, i64), sites: (i64, i64)) -> BTreeSet<(i64, i64)> {
        let mut out = BTreeSet::new();
        for s in steps.0..=steps.1 {
            for x in sites.0..=sites.1 {
                if self.contains(&Point::cell(s, x)) {
                    out.insert((s, x));
                }
            }
        }
        out
    }
}

/// J+(r): union of the closed forward light cones of the points of `r`.
pub fn causal_future(r: &Region) -> Cone {
    Cone { base: r.clone(), future: true }
}

/// J-(r).
pub fn causal_past(r: &Region) -> Cone {
    Cone { base: r.clone(), future: false }
}

/// Some point of `a` causally precedes a distinct point of `b`.
pub fn precedes(a: &Region, b: &Region) -> bool {
    let bb = b.boxes();
    a.boxes().iter().any(|x| bb.iter().any(|y| x.precedes(y)))
}

/// No point of `a` is causally related to, or coincides with, a point of `b`.
pub fn spacelike(a: &Region, b: &Region) -> bool {
    let bb = b.boxes();
    !a.boxes().iter().any(|x| bb.iter().any(|y| x.touches(y)))
}

/// Every point of `a` precedes every point of `b`.
pub fn wholly_precedes(a: &Region, b: &Region) -> bool {
    let bb = b.boxes();
    a.boxes().iter().all(|x| bb.iter().all(|y| x.wholly_precedes(y)))
}

/// Reflexive-transitive closure of the precedence relation on a list of
/// regions.
#[derive(Debug, Clone)]
pub struct CausalOrder {
    pub regions: Vec<Region>,
    pub base: Vec<Vec<bool>>,
    pub closure: Vec<Vec<bool>>,
}

pub const MAX_EXTENSION_REGIONS: usize = 8;

pub fn build_order(regions: &[Region]) -> Result<CausalOrder, CausalError> {
    let n = regions.len();
    let mut base = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                base[i][j] = precedes(&regions[i], &regions[j]);
            }
        }
    }
    CausalOrder::from_base(regions, base)
}

/// Reflexive-transitive closure (Warshall).
pub fn transitive_closure(rel: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let n = rel.len();
    let mut c: Vec<Vec<bool>> = rel.to_vec();
    for (i, row) in c.iter_mut().enumerate() {
        row[i] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if c[i][k] {
                for j in 0..n {
                    if c[k][j] {
                        c[i][j] = true;
                    }
                }
            }
        }
    }
    c
}

impl CausalOrder {
    /// Close an explicit precedence relation; fails if it has a cycle.
    pub fn from_base(regions: &[Region], base: Vec<Vec<bool>>) -> Result<CausalOrder, CausalError> {
        if regions.is_empty() {
            return Err(CausalError::Empty);
        }
        let n = regions.len();
        let closure = transitive_closure(&base);
        for i in 0..n {
            for j in (i + 1)..n {
                if closure[i][j] && closure[j][i] {
                    return Err(CausalError::CycleError {
                        a: regions[i].label.clone(),
                        b: regions[j].label.clone(),
                    });
                }
            }
        }
        Ok(CausalOrder { regions: regions.to_vec(), base, closure })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// `i` strictly before `j` in the partial order.
    pub fn before(&self, i: usize, j: usize) -> bool {
        i != j && self.closure[i][j]
    }

    pub fn comparable(&self, i: usize, j: usize) -> bool {
        self.closure[i][j] || self.closure[j][i]
    }

    /// Deterministic linear extension: Kahn's algorithm, ties broken by index.
    pub fn linear_extension(&self) -> Vec<usize> {
        let n = self.len();
        let mut placed = vec![false; n];
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let next = (0..n)
                .find(|&j| !placed[j] && (0..n).all(|i| placed[i] || !self.before(i, j)))
                .expect("acyclic order always has a minimal element");
            placed[next] = true;
            out.push(next);
        }
        out
    }

    /// Every linear extension (at most eight regions).
    pub fn linear_extensions(&self) -> Result<Vec<Vec<usize>>, CausalError> {
        let n = self.len();
        if n > MAX_EXTENSION_REGIONS {
            return Err(CausalError::TooManyRegions { max: MAX_EXTENSION_REGIONS, got: n });
        }
        let mut out = Vec::new();
        let mut cur = Vec::with_capacity(n);
        let mut placed = vec![false; n];
        self.extend(&mut cur, &mut placed, &mut out);
        Ok(out)
    }

    fn extend(&self, cur: &mut Vec<usize>, placed: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        let n = self.len();
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for j in 0..n {
            if !placed[j] && (0..n).all(|i| placed[i] || !self.before(i, j)) {
                placed[j] = true;
                cur.push(j);
                self.extend(cur, placed, out);
                cur.pop();
                placed[j] = false;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Configuration {
    SorkinType,
    StrictlyOrdered,
    AllSpacelike,
    Other,
}

pub fn classify_configuration(a: &Region, b: &Region, c: &Region) -> Configuration {
    if causal_future(a).intersects(b) && causal_past(c).intersects(b) && spacelike(a, c) {
        return Configuration::SorkinType;
    }
    if spacelike(a, b) && spacelike(b, c) && spacelike(a, c) {
        return Configuration::AllSpacelike;
    }
    let rs = [a, b, c];
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    if perms.iter().any(|p| {
        wholly_precedes(rs[p[0]], rs[p[1]]) && wholly_precedes(rs[p[1]], rs[p[2]]) && wholly_precedes(rs[p[0]], rs[p[2]])
    }) {
        return Configuration::StrictlyOrdered;
    }
    Configuration::Other
}

/// Named region layouts used throughout the crate.
pub mod presets {
    use super::Region;

    /// Tripartite layout: O2 reaches into the future of O1 and the past of
    /// O3, while O1 and O3 stay spacelike.
    pub fn fig2() -> [Region; 3] {
        [
            Region::rect("O1", 0.0, 1.0, -4.0, -3.0).unwrap(),
            Region::rect("O2", 1.5, 2.5, -3.5, 3.5).unwrap(),
            Region::rect("O3", 3.0, 4.0, 3.0, 4.0).unwrap(),
        ]
    }

    /// O1 below, O2 a thickened slab above it, O3 above the slab.
    pub fn fig1() -> [Region; 3] {
        [
            Region::rect("O1", 0.0, 1.0, -1.0, 1.0).unwrap(),
            Region::rect("O2", 2.0, 2.5, -10.0, 10.0).unwrap(),
            Region::rect("O3", 4.0, 5.0, 6.0, 8.0).unwrap(),
        ]
    }

    /// Two spacelike regions at equal times, used for bipartite runs.
    pub fn bipartite() -> [Region; 2] {
        [
            Region::rect("O1", 0.0, 1.0, -4.0, -3.0).unwrap(),
            Region::rect("O3", 0.0, 1.0, 3.0, 4.0).unwrap(),
        ]
    }
}
