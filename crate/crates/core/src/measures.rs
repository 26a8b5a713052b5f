//! Probability measures on finite sets and uniform 1-D grids.
//!
//! Grid measures store *cell masses* (density times cell width), so finite
//! and grid measures share every code path.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ext::ExtReal;
use crate::matrix::Matrix;

/// Tolerance on total mass at construction. Inputs within it are
/// renormalized, inputs off by more are rejected.
pub const MASS_TOL: f64 = 1e-12;

/// Largest state count accepted by the exact Levy-Prohorov enumeration.
pub const LP_MAX_STATES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpaceRepr", into = "SpaceRepr")]
pub enum StateSpace {
    Finite(FiniteSpace),
    Grid(Grid1d),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteSpace {
    size: usize,
    distances: Matrix,
    points: Option<Vec<f64>>,
}

/// The interval `[lo, hi]` cut into `cells` cells of width `h`, each
/// represented by its center `lo + (i + 1/2) h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1d {
    lo: f64,
    hi: f64,
    cells: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SpaceRepr {
    Finite {
        size: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        points: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        distances: Option<Vec<Vec<f64>>>,
    },
    Grid1d {
        lo: f64,
        hi: f64,
        cells: usize,
    },
}

impl TryFrom<SpaceRepr> for StateSpace {
    type Error = Error;

    fn try_from(repr: SpaceRepr) -> Result<Self> {
        match repr {
            SpaceRepr::Grid1d { lo, hi, cells } => StateSpace::grid(lo, hi, cells),
            SpaceRepr::Finite { size, points: Some(p), distances: None } => {
                if p.len() != size {
                    return Err(Error::DimensionMismatch { expected: size, got: p.len() });
                }
                StateSpace::finite_with_points(p)
            }
            SpaceRepr::Finite { size, points: None, distances: Some(d) } => {
                if d.len() != size {
                    return Err(Error::DimensionMismatch { expected: size, got: d.len() });
                }
                StateSpace::finite_with_distances(Matrix::from_rows(&d)?)
            }
            SpaceRepr::Finite { size, points: None, distances: None } => StateSpace::finite(size),
            SpaceRepr::Finite { .. } => Err(Error::InvalidSpace(
                "give either points or distances for a finite space, not both".into(),
            )),
        }
    }
}

impl From<StateSpace> for SpaceRepr {
    fn from(space: StateSpace) -> Self {
        match space {
            StateSpace::Grid(g) => SpaceRepr::Grid1d { lo: g.lo, hi: g.hi, cells: g.cells },
            StateSpace::Finite(f) => match f.points {
                Some(points) => SpaceRepr::Finite { size: f.size, points: Some(points), distances: None },
                None => SpaceRepr::Finite {
                    size: f.size,
                    points: None,
                    distances: Some(f.distances.to_rows()),
                },
            },
        }
    }
}

impl StateSpace {
    /// Finite space with the discrete metric `d(i, j) = 1` for `i != j`.
    pub fn finite(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidSpace(format!("need at least 2 states, got {size}")));
        }
        let distances = Matrix::from_fn(size, size, |i, j| if i == j { 0.0 } else { 1.0 });
        Ok(StateSpace::Finite(FiniteSpace { size, distances, points: None }))
    }

    /// Finite space embedded in the real line; distances are `|p_i - p_j|`.
    pub fn finite_with_points(points: Vec<f64>) -> Result<Self> {
        let size = points.len();
        if size < 2 {
            return Err(Error::InvalidSpace(format!("need at least 2 states, got {size}")));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidSpace("non-finite point".into()));
        }
        for i in 0..size {
            for j in 0..i {
                if points[i] == points[j] {
                    return Err(Error::InvalidSpace(format!("points {j} and {i} coincide")));
                }
            }
        }
        let distances = Matrix::from_fn(size, size, |i, j| (points[i] - points[j]).abs());
        Ok(StateSpace::Finite(FiniteSpace { size, distances, points: Some(points) }))
    }

    /// Finite space with an explicit distance table.
    pub fn finite_with_distances(distances: Matrix) -> Result<Self> {
        let size = distances.rows();
        if size < 2 || !distances.is_square() {
            return Err(Error::InvalidSpace("distance table must be square with m >= 2".into()));
        }
        for i in 0..size {
            if distances[(i, i)] != 0.0 {
                return Err(Error::InvalidSpace(format!("nonzero diagonal at {i}")));
            }
            for j in 0..size {
                let d = distances[(i, j)];
                if !(d.is_finite() && d >= 0.0) {
                    return Err(Error::InvalidSpace(format!("bad distance at ({i}, {j})")));
                }
                if i != j && d == 0.0 {
                    return Err(Error::InvalidSpace(format!("distinct states {i}, {j} at distance 0")));
                }
                if (d - distances[(j, i)]).abs() > 1e-12 * d.max(1.0) {
                    return Err(Error::InvalidSpace(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        // Triangle inequality on every triple among the first 64 states.
        let k = size.min(64);
        for i in 0..k {
            for j in 0..k {
                for l in 0..k {
                    let lhs = distances[(i, l)];
                    let rhs = distances[(i, j)] + distances[(j, l)];
                    if lhs > rhs + 1e-12 * lhs.max(1.0) {
                        return Err(Error::InvalidSpace(format!(
                            "triangle inequality fails on ({i}, {j}, {l})"
                        )));
                    }
                }
            }
        }
        Ok(StateSpace::Finite(FiniteSpace { size, distances, points: None }))
    }

    pub fn grid(lo: f64, hi: f64, cells: usize) -> Result<Self> {
        if cells < 2 {
            return Err(Error::InvalidSpace(format!("need at least 2 cells, got {cells}")));
        }
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidSpace(format!("bad interval [{lo}, {hi}]")));
        }
        Ok(StateSpace::Grid(Grid1d { lo, hi, cells }))
    }

    pub fn len(&self) -> usize {
        match self {
            StateSpace::Finite(f) => f.size,
            StateSpace::Grid(g) => g.cells,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_grid(&self) -> Option<&Grid1d> {
        match self {
            StateSpace::Grid(g) => Some(g),
            StateSpace::Finite(_) => None,
        }
    }

    pub fn is_grid(&self) -> bool {
        self.as_grid().is_some()
    }

    /// Cell width on grids; `None` on finite spaces.
    pub fn width(&self) -> Option<f64> {
        self.as_grid().map(Grid1d::width)
    }

    /// Real-line coordinate of a state, when the space has one.
    pub fn point(&self, i: usize) -> Option<f64> {
        match self {
            StateSpace::Grid(g) => Some(g.center(i)),
            StateSpace::Finite(f) => f.points.as_ref().map(|p| p[i]),
        }
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        match self {
            StateSpace::Grid(g) => (g.center(i) - g.center(j)).abs(),
            StateSpace::Finite(f) => f.distances[(i, j)],
        }
    }
}

impl Grid1d {
    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.cells as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.cells).map(|i| self.center(i)).collect()
    }

    /// Cell containing `x`, clamped to the interval.
    pub fn cell_of(&self, x: f64) -> usize {
        let k = ((x - self.lo) / self.width()).floor();
        (k.max(0.0) as usize).min(self.cells - 1)
    }

    pub fn boundary_distance(&self, x: f64) -> f64 {
        (x - self.lo).min(self.hi - x)
    }

    /// Length of `[a, b]` intersected with cell `i`.
    pub fn overlap(&self, i: usize, a: f64, b: f64) -> f64 {
        let h = self.width();
        let left = self.lo + i as f64 * h;
        let right = left + h;
        (b.min(right) - a.max(left)).max(0.0)
    }
}

/// A probability vector over the states of a [`StateSpace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureRepr", into = "MeasureRepr")]
pub struct DiscreteMeasure {
    space: Arc<StateSpace>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MeasureRepr {
    space: Arc<StateSpace>,
    weights: Vec<f64>,
}

impl TryFrom<MeasureRepr> for DiscreteMeasure {
    type Error = Error;

    fn try_from(r: MeasureRepr) -> Result<Self> {
        DiscreteMeasure::new(r.space, r.weights)
    }
}

impl From<DiscreteMeasure> for MeasureRepr {
    fn from(m: DiscreteMeasure) -> Self {
        MeasureRepr { space: m.space, weights: m.weights }
    }
}

fn check_weights(space: &StateSpace, weights: &[f64]) -> Result<f64> {
    if weights.len() != space.len() {
        return Err(Error::DimensionMismatch { expected: space.len(), got: weights.len() });
    }
    if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidMeasure(format!("weight {i} is {}", weights[i])));
    }
    Ok(weights.iter().sum())
}

impl DiscreteMeasure {
    /// Probability vector whose total mass is within [`MASS_TOL`] of one.
    pub fn new(space: Arc<StateSpace>, weights: Vec<f64>) -> Result<Self> {
        let total = check_weights(&space, &weights)?;
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidMeasure(format!("total mass {total} is not 1")));
        }
        Ok(Self::renormalized(space, weights, total))
    }

    /// Normalizes any nonnegative vector with positive finite total mass.
    pub fn from_unnormalized(space: Arc<StateSpace>, weights: Vec<f64>) -> Result<Self> {
        let total = check_weights(&space, &weights)?;
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidMeasure(format!("total mass {total} cannot be normalized")));
        }
        Ok(Self::renormalized(space, weights, total))
    }

    fn renormalized(space: Arc<StateSpace>, mut weights: Vec<f64>, total: f64) -> Self {
        if total != 1.0 {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        DiscreteMeasure { space, weights }
    }

    pub fn dirac(space: Arc<StateSpace>, i: usize) -> Result<Self> {
        let m = space.len();
        if i >= m {
            return Err(Error::Precondition(format!("state {i} outside 0..{m}")));
        }
        let mut w = vec![0.0; m];
        w[i] = 1.0;
        Ok(DiscreteMeasure { space, weights: w })
    }

    pub fn uniform(space: Arc<StateSpace>) -> Self {
        let m = space.len();
        DiscreteMeasure { space, weights: vec![1.0 / m as f64; m] }
    }

    pub fn space(&self) -> &Arc<StateSpace> {
        &self.space
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mass(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// Indices with positive mass.
    pub fn support(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.weights[i] > 0.0).collect()
    }

    /// `sum_i f_i w_i`
    pub fn integrate(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(w, f)| w * f).sum()
    }

    /// `t * self + (1 - t) * other`
    pub fn mix(&self, other: &DiscreteMeasure, t: f64) -> Result<DiscreteMeasure> {
        same_space(self, other)?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Precondition(format!("mixing weight {t} outside [0, 1]")));
        }
        let w = self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| t * a + (1.0 - t) * b)
            .collect();
        DiscreteMeasure::new(self.space.clone(), w)
    }
}

pub(crate) fn same_space(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if !Arc::ptr_eq(&a.space, &b.space) && a.space != b.space {
        return Err(Error::SpaceMismatch);
    }
    Ok(())
}

/// `sum p_i log(p_i / q_i)` with `0 log 0 = 0`; infinite when `p` charges a
/// state `q` does not.
pub fn relative_entropy_slices(p: &[f64], q: &[f64]) -> ExtReal {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return ExtReal::Infinite;
        }
        acc += pi * (pi / qi).ln();
    }
    // Rounding can push a zero divergence a hair negative.
    ExtReal::Finite(acc.max(0.0))
}

pub fn relative_entropy(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<ExtReal> {
    same_space(mu, nu)?;
    Ok(relative_entropy_slices(&mu.weights, &nu.weights))
}

/// `R(gamma || mu ⊗ K)`, the joint relative entropy of a coupling against the
/// one-step law started from `mu`.
pub fn joint_relative_entropy(gamma: &Matrix, mu: &DiscreteMeasure, kernel: &Matrix) -> Result<ExtReal> {
    let m = mu.len();
    for mat in [gamma, kernel] {
        if mat.rows() != m || mat.cols() != m {
            return Err(Error::DimensionMismatch { expected: m, got: mat.rows() });
        }
    }
    let mut acc = 0.0;
    for i in 0..m {
        let mi = mu.mass(i);
        for j in 0..m {
            let g = gamma[(i, j)];
            if g == 0.0 {
                continue;
            }
            let reference = mi * kernel[(i, j)];
            if reference <= 0.0 {
                return Ok(ExtReal::Infinite);
            }
            acc += g * (g / reference).ln();
        }
    }
    Ok(ExtReal::Finite(acc.max(0.0)))
}

/// Total variation norm `sum_i |mu_i - nu_i|`, which lies in `[0, 2]`.
pub fn tv_norm(eta_plus: &DiscreteMeasure, eta_minus: &DiscreteMeasure) -> Result<f64> {
    same_space(eta_plus, eta_minus)?;
    Ok(tv_slices(&eta_plus.weights, &eta_minus.weights))
}

pub(crate) fn tv_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Exact Levy-Prohorov distance by enumerating every subset of states.
pub fn lp_distance(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    same_space(mu, nu)?;
    let m = mu.len();
    if m > LP_MAX_STATES {
        return Err(Error::Capability(format!(
            "exact Levy-Prohorov enumeration is limited to {LP_MAX_STATES} states (got {m}); \
             use tv_norm or w1_distance instead"
        )));
    }
    let space = mu.space();
    let dist = Matrix::from_fn(m, m, |i, j| space.distance(i, j));
    Ok(lp_one_sided(&mu.weights, &nu.weights, &dist).max(lp_one_sided(&nu.weights, &mu.weights, &dist)))
}

/// `inf { eps > 0 : mu(A) <= nu(A^eps) + eps for all A }`.
fn lp_one_sided(mu: &[f64], nu: &[f64], dist: &Matrix) -> f64 {
    let m = mu.len();
    let mut worst = 0.0f64;
    let mut stack_d = vec![vec![f64::INFINITY; m]; m + 1];
    let mut order: Vec<usize> = (0..m).collect();
    lp_recurse(0, 0.0, false, mu, nu, dist, &mut stack_d, &mut order, &mut worst);
    worst
}

#[allow(clippy::too_many_arguments)]
fn lp_recurse(
    depth: usize,
    mass_a: f64,
    nonempty: bool,
    mu: &[f64],
    nu: &[f64],
    dist: &Matrix,
    stack_d: &mut Vec<Vec<f64>>,
    order: &mut Vec<usize>,
    worst: &mut f64,
) {
    let m = mu.len();
    if depth == m {
        if nonempty {
            let e = lp_subset_threshold(mass_a, &stack_d[m], nu, order);
            *worst = worst.max(e);
        }
        return;
    }
    // Exclude state `depth`.
    let (head, tail) = stack_d.split_at_mut(depth + 1);
    tail[0].copy_from_slice(&head[depth]);
    lp_recurse(depth + 1, mass_a, nonempty, mu, nu, dist, stack_d, order, worst);
    // Include it.
    let (head, tail) = stack_d.split_at_mut(depth + 1);
    for (y, slot) in tail[0].iter_mut().enumerate() {
        *slot = head[depth][y].min(dist[(depth, y)]);
    }
    lp_recurse(depth + 1, mass_a + mu[depth], true, mu, nu, dist, stack_d, order, worst);
}

/// Smallest `eps > 0` with `mu(A) - nu({y : d(y, A) < eps}) <= eps`, given the
/// distances `d(y, A)`.
fn lp_subset_threshold(mass_a: f64, d_to_a: &[f64], nu: &[f64], order: &mut [usize]) -> f64 {
    order.sort_by(|&a, &b| d_to_a[a].total_cmp(&d_to_a[b]));
    let mut covered = 0.0;
    let mut k = 0;
    while k < order.len() {
        let level = d_to_a[order[k]];
        while k < order.len() && d_to_a[order[k]] == level {
            covered += nu[order[k]];
            k += 1;
        }
        // For eps in (level, next], the open neighbourhood holds `covered`.
        let next = if k < order.len() { d_to_a[order[k]] } else { f64::INFINITY };
        let deficit = mass_a - covered;
        if deficit <= level {
            return level;
        }
        if deficit <= next {
            return deficit;
        }
    }
    1.0
}

/// Wasserstein-1 distance on the real line via cumulative mass functions.
pub fn w1_distance(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    same_space(mu, nu)?;
    let space = mu.space();
    let m = mu.len();
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(m);
    for i in 0..m {
        match space.point(i) {
            Some(x) => order.push((x, i)),
            None => {
                return Err(Error::Capability(
                    "w1_distance needs a grid or a finite space with point coordinates".into(),
                ))
            }
        }
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    for w in order.windows(2) {
        let i = w[0].1;
        cdf_gap += mu.mass(i) - nu.mass(i);
        total += cdf_gap.abs() * (w[1].0 - w[0].0);
    }
    Ok(total)
}

/// Lebesgue-decomposed measure `(1 - p) nu_lambda + p sum_k m_k delta_{x_k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HybridRepr", into = "HybridRepr")]
pub struct HybridMeasure {
    density: DiscreteMeasure,
    atoms: Vec<(usize, f64)>,
    p: f64,
}

#[derive(Serialize, Deserialize)]
struct HybridRepr {
    space: Arc<StateSpace>,
    weights: Vec<f64>,
    atoms: Vec<(usize, f64)>,
    p: f64,
}

impl TryFrom<HybridRepr> for HybridMeasure {
    type Error = Error;

    fn try_from(r: HybridRepr) -> Result<Self> {
        HybridMeasure::new(DiscreteMeasure::new(r.space, r.weights)?, r.atoms, r.p)
    }
}

impl From<HybridMeasure> for HybridRepr {
    fn from(h: HybridMeasure) -> Self {
        HybridRepr { space: h.density.space, weights: h.density.weights, atoms: h.atoms, p: h.p }
    }
}

impl HybridMeasure {
    pub fn new(density: DiscreteMeasure, mut atoms: Vec<(usize, f64)>, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidMeasure(format!("mixing weight p = {p} outside [0, 1]")));
        }
        let m = density.len();
        for (k, &(cell, mass)) in atoms.iter().enumerate() {
            if cell >= m {
                return Err(Error::InvalidMeasure(format!("atom cell {cell} outside 0..{m}")));
            }
            if !(mass > 0.0 && mass.is_finite()) {
                return Err(Error::InvalidMeasure(format!("atom {k} has mass {mass}")));
            }
            if atoms[..k].iter().any(|&(c, _)| c == cell) {
                return Err(Error::InvalidMeasure(format!("atom cell {cell} repeated")));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if p > 0.0 {
            if (total - 1.0).abs() > MASS_TOL {
                return Err(Error::InvalidMeasure(format!("atom masses sum to {total}, not 1")));
            }
            atoms.iter_mut().for_each(|a| a.1 /= total);
        } else if !atoms.is_empty() && (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidMeasure(format!("atom masses sum to {total}, not 1")));
        }
        Ok(HybridMeasure { density, atoms, p })
    }

    /// Recover the density part from a flattened measure, given the atoms
    /// and the singular weight `p < 1`.
    pub fn from_flat(flat: &DiscreteMeasure, atoms: Vec<(usize, f64)>, p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Precondition(format!("cannot unflatten with p = {p}")));
        }
        let mut w = flat.weights.clone();
        for &(cell, mass) in &atoms {
            if cell >= w.len() {
                return Err(Error::InvalidMeasure(format!("atom cell {cell} out of range")));
            }
            w[cell] -= p * mass;
        }
        for x in w.iter_mut() {
            *x /= 1.0 - p;
            if *x < 0.0 {
                if *x < -1e-12 {
                    return Err(Error::InvalidMeasure("atoms exceed the flattened mass".into()));
                }
                *x = 0.0;
            }
        }
        let density = DiscreteMeasure::from_unnormalized(flat.space.clone(), w)?;
        HybridMeasure::new(density, atoms, p)
    }

    pub fn density(&self) -> &DiscreteMeasure {
        &self.density
    }

    pub fn atoms(&self) -> &[(usize, f64)] {
        &self.atoms
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Atomic part as a plain measure (`None` when there are no atoms).
    pub fn singular(&self) -> Option<DiscreteMeasure> {
        if self.atoms.is_empty() {
            return None;
        }
        let mut w = vec![0.0; self.density.len()];
        for &(c, mass) in &self.atoms {
            w[c] += mass;
        }
        DiscreteMeasure::from_unnormalized(self.density.space.clone(), w).ok()
    }

    pub fn flatten(&self) -> DiscreteMeasure {
        let mut w: Vec<f64> = self.density.weights.iter().map(|x| (1.0 - self.p) * x).collect();
        for &(c, mass) in &self.atoms {
            w[c] += self.p * mass;
        }
        let total: f64 = w.iter().sum();
        DiscreteMeasure::renormalized(self.density.space.clone(), w, total)
    }
}
