//! Ball mollification of singular measures on a 1-D grid.
//!
//! A finitely supported `nu_s` is approximated by
//! `nu_s^n = (1/n) sum_i Uniform(B_rho(Y_i))` with `Y_i` i.i.d. from `nu_s`,
//! where the radius `rho = varrho^n` is small enough that the acceptance
//! density and the rejection mass are nearly constant on each ball, the balls
//! are disjoint and stay inside the interval. The kernel
//!
//! ```text
//! q^n(x, .) = (1/N(x)) sum_{i: x in B_i} Leb|B_i + (1 - V) delta_x
//! ```
//!
//! leaves `nu_s^n` invariant and its cost is bounded by
//! `-V log(V/2) + V/n + (1/n) sum_i log(1/r(Y_i)) + 1/n`, with `V = 2 rho`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ext::ExtReal;
use crate::kernel::{ContinuumMh, MhKernel, StochasticKernel};
use crate::matrix::Matrix;
use crate::measures::{tv_slices, w1_distance, DiscreteMeasure, Grid1d, StateSpace};
use crate::rate::{rate_primal_sinkhorn, RateOptions};
use crate::sampler::stream_rng;

/// A point prepared for repeated kernel evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalPoint {
    pub x: f64,
    /// Family-specific cached data (the proposal normalizer for MH).
    pub aux: f64,
    pub rejection: f64,
}

/// Pointwise access to an acceptance density and a rejection mass on an
/// interval.
pub trait LocalKernel: Sync {
    fn domain(&self) -> (f64, f64);
    fn point(&self, x: f64) -> LocalPoint;
    fn accept(&self, y: &LocalPoint, z: &LocalPoint) -> f64;
}

/// The continuum MH kernel with proposal normalizers at the cell centers
/// cached.
#[derive(Debug, Clone)]
pub struct PointwiseMh {
    mh: ContinuumMh,
    center_norms: Vec<f64>,
}

impl PointwiseMh {
    pub fn new(k: &MhKernel) -> Result<Self> {
        let mh = k.continuum()?;
        let center_norms = mh.center_norms();
        Ok(PointwiseMh { mh, center_norms })
    }

    pub fn grid(&self) -> &Grid1d {
        self.mh.grid()
    }
}

impl LocalKernel for PointwiseMh {
    fn domain(&self) -> (f64, f64) {
        (self.mh.grid().lo(), self.mh.grid().hi())
    }

    fn point(&self, x: f64) -> LocalPoint {
        LocalPoint { x, aux: self.mh.proposal_norm(x), rejection: self.mh.rejection_with_norms(x, &self.center_norms) }
    }

    fn accept(&self, y: &LocalPoint, z: &LocalPoint) -> f64 {
        self.mh.accept_with_norms(y.x, z.x, y.aux, z.aux)
    }
}

/// `Delta_eps(x)`: the largest radius `t` such that
/// `|log a(x,x) - log a(y,z)| < eps` and `|log r(x) - log r(y)| < eps` for all
/// `y, z` in the ball.
///
/// The ball is scanned outward on the lattice `x + k * step`; every new
/// lattice point is checked against itself and all points already accepted.
/// The result is the radius of the last fully accepted lattice shell, so it
/// never exceeds the true value at the sampled points. The scan stops at the
/// boundary distance, or at `cap` when given.
pub fn delta_eps(kernel: &dyn LocalKernel, x: f64, eps: f64, step: f64, cap: Option<f64>) -> Result<f64> {
    if !(eps > 0.0) || !(step > 0.0) {
        return Err(Error::Precondition("eps and step must be positive".into()));
    }
    let (lo, hi) = kernel.domain();
    if !(x > lo && x < hi) {
        return Err(Error::Precondition(format!("{x} is not interior to [{lo}, {hi}]")));
    }
    let px = kernel.point(x);
    let axx = kernel.accept(&px, &px);
    if !(px.rejection > 0.0) || !(axx > 0.0) {
        return Err(Error::Precondition(format!("r({x}) and a({x},{x}) must be positive")));
    }
    let (log_a, log_r) = (axx.ln(), px.rejection.ln());
    let mut limit = (x - lo).min(hi - x);
    if let Some(c) = cap {
        limit = limit.min(c);
    }
    let ok_a = |v: f64| v > 0.0 && (v.ln() - log_a).abs() < eps;
    let mut accepted = vec![px];
    let mut k = 1usize;
    loop {
        let t = k as f64 * step;
        if t >= limit {
            return Ok(limit);
        }
        for y in [x - t, x + t] {
            let p = kernel.point(y);
            let good = p.rejection > 0.0
                && (p.rejection.ln() - log_r).abs() < eps
                && ok_a(kernel.accept(&p, &p))
                && accepted.iter().all(|q| ok_a(kernel.accept(&p, q)) && ok_a(kernel.accept(q, &p)));
            if !good {
                return Ok((k - 1) as f64 * step);
            }
            accepted.push(p);
        }
        k += 1;
    }
}

/// Atoms of a singular measure and i.i.d. draws from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomSample {
    /// `(cell, mass)` pairs.
    pub atoms: Vec<(usize, f64)>,
    /// Cells `Y_1, Y_2, ...`; the construction at `n` uses the first `n`.
    pub draws: Vec<usize>,
    pub seed: u64,
}

impl AtomSample {
    pub fn draw(atoms: Vec<(usize, f64)>, n: usize, seed: u64) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidMeasure("no atoms".into()));
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > 1e-12 || atoms.iter().any(|a| !(a.1 > 0.0)) {
            return Err(Error::InvalidMeasure("atom masses must be positive and sum to 1".into()));
        }
        let dist = WeightedIndex::new(atoms.iter().map(|a| a.1)).map_err(|e| Error::InvalidMeasure(e.to_string()))?;
        let mut rng = stream_rng(seed, 0);
        let draws = (0..n).map(|_| atoms[dist.sample(&mut rng)].0).collect();
        Ok(AtomSample { atoms, draws, seed })
    }

    /// `nu_s` as a measure on the grid cells.
    pub fn singular(&self, space: Arc<StateSpace>) -> Result<DiscreteMeasure> {
        let mut w = vec![0.0; space.len()];
        for &(c, m) in &self.atoms {
            if c >= w.len() {
                return Err(Error::Precondition(format!("atom cell {c} out of range")));
            }
            w[c] += m;
        }
        DiscreteMeasure::new(space, w)
    }

    /// Empirical measure of `Y_1..Y_n`.
    pub fn empirical(&self, space: Arc<StateSpace>, n: usize) -> Result<DiscreteMeasure> {
        let mut w = vec![0.0; space.len()];
        for &c in &self.draws[..n] {
            w[c] += 1.0 / n as f64;
        }
        DiscreteMeasure::from_unnormalized(space, w)
    }
}

/// The five terms whose minimum is `varrho^n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusTerms {
    pub inv_n: f64,
    /// `min_i Delta_{1/n}(Y_i)`, scanned no further than the other terms.
    pub delta: f64,
    /// Half the smallest distance between distinct draws, if any.
    pub pair_half: Option<f64>,
    pub boundary_half: f64,
    /// `min_i a(Y_i, Y_i)`
    pub self_accept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingState {
    pub n: usize,
    /// Distinct draw locations with their counts among `Y_1..Y_n`.
    pub centers: Vec<(usize, usize)>,
    /// `Delta_{1/n}` at each distinct center.
    pub deltas: Vec<f64>,
    pub terms: RadiusTerms,
    pub varrho: f64,
    /// `V_n = 2 varrho`, the length of a ball.
    pub volume: f64,
    grid: Grid1d,
}

impl SmoothingState {
    pub fn grid(&self) -> &Grid1d {
        &self.grid
    }

    /// Ball `[Y - varrho, Y + varrho]` around a distinct center.
    fn ball(&self, cell: usize) -> (f64, f64) {
        let y = self.grid.center(cell);
        (y - self.varrho, y + self.varrho)
    }

    /// `sum_i |B_i ∩ cell c|` over the draws.
    fn coverage(&self) -> Vec<(usize, Vec<(usize, f64)>)> {
        // For every distinct center: the cells its ball touches with overlap lengths.
        self.centers
            .iter()
            .map(|&(cell, count)| {
                let (a, b) = self.ball(cell);
                let first = self.grid.cell_of(a);
                let last = self.grid.cell_of(b);
                let cells = (first..=last)
                    .map(|c| (c, self.grid.overlap(c, a, b)))
                    .filter(|(_, ov)| *ov > 0.0)
                    .collect();
                (count, cells)
            })
            .collect()
    }

    fn check_resolved(&self) -> Result<()> {
        let h = self.grid.width();
        if self.varrho < 2.0 * h {
            let needed = ((self.grid.hi() - self.grid.lo()) * 2.0 / self.varrho).ceil() as usize;
            return Err(Error::Discretization {
                message: format!("radius {:e} is below twice the cell width {:e}; refine the grid", self.varrho, h),
                suggested_cells: needed,
            });
        }
        Ok(())
    }
}

/// Kernel evaluation context shared across `n`.
pub struct Smoother<'a> {
    kernel: &'a MhKernel,
    local: PointwiseMh,
    grid: Grid1d,
}

impl<'a> Smoother<'a> {
    pub fn new(kernel: &'a MhKernel) -> Result<Self> {
        let local = PointwiseMh::new(kernel)?;
        let grid = *local.grid();
        Ok(Smoother { kernel, local, grid })
    }

    pub fn kernel(&self) -> &MhKernel {
        self.kernel
    }

    pub fn local(&self) -> &PointwiseMh {
        &self.local
    }

    /// `varrho^n` for the first `n` draws of `sample`.
    pub fn varrho_n(&self, sample: &AtomSample, n: usize) -> Result<SmoothingState> {
        if n == 0 || n > sample.draws.len() {
            return Err(Error::Precondition(format!("need 1 <= n <= {}", sample.draws.len())));
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &c in &sample.draws[..n] {
            if c >= self.grid.cells() {
                return Err(Error::Precondition(format!("draw cell {c} out of range")));
            }
            *counts.entry(c).or_default() += 1;
        }
        let centers: Vec<(usize, usize)> = counts.into_iter().collect();
        for &(c, _) in &centers {
            if !(self.kernel.rejection()[c] > 0.0) {
                return Err(Error::Precondition(format!(
                    "r vanishes at draw cell {c}: the singular measure has infinite rate"
                )));
            }
        }
        let xs: Vec<f64> = centers.iter().map(|&(c, _)| self.grid.center(c)).collect();
        let inv_n = 1.0 / n as f64;
        let pair_half = xs.windows(2).map(|w| 0.5 * (w[1] - w[0])).reduce(f64::min);
        let boundary_half = xs.iter().map(|&x| 0.5 * self.grid.boundary_distance(x)).fold(f64::INFINITY, f64::min);
        let self_accept = xs
            .iter()
            .map(|&x| {
                let p = self.local.point(x);
                self.local.accept(&p, &p)
            })
            .fold(f64::INFINITY, f64::min);
        let others = inv_n.min(pair_half.unwrap_or(f64::INFINITY)).min(boundary_half).min(self_accept);
        let step = self.grid.width() / 4.0;
        let deltas = xs
            .par_iter()
            .map(|&x| delta_eps(&self.local, x, inv_n, step, Some(others)))
            .collect::<Result<Vec<f64>>>()?;
        let delta = deltas.iter().cloned().fold(f64::INFINITY, f64::min);
        let varrho = others.min(delta);
        if !(varrho > 0.0) {
            return Err(Error::Discretization {
                message: "the acceptance density varies too fast near a draw for the scan step".into(),
                suggested_cells: self.grid.cells() * 2,
            });
        }
        Ok(SmoothingState {
            n,
            centers,
            deltas,
            terms: RadiusTerms { inv_n, delta, pair_half, boundary_half, self_accept },
            varrho,
            volume: 2.0 * varrho,
            grid: self.grid,
        })
    }
}

/// Cell masses of `nu_s^n`: exact ball overlaps divided by `n V_n`.
pub fn build_nu_s_n(state: &SmoothingState, space: Arc<StateSpace>) -> Result<DiscreteMeasure> {
    state.check_resolved()?;
    if space.as_grid() != Some(&state.grid) {
        return Err(Error::SpaceMismatch);
    }
    let mut w = vec![0.0; state.grid.cells()];
    let scale = 1.0 / (state.n as f64 * state.volume);
    for (count, cells) in state.coverage() {
        for (c, ov) in cells {
            w[c] += count as f64 * ov * scale;
        }
    }
    DiscreteMeasure::new(space, w)
}

/// `q^n` on the cells covered by some ball; every other row is `delta_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedKernel {
    m: usize,
    support: Vec<usize>,
    block: Matrix,
}

impl SmoothedKernel {
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn block(&self) -> &Matrix {
        &self.block
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        match self.support.binary_search(&i) {
            Ok(a) => {
                for (b, &j) in self.support.iter().enumerate() {
                    out[j] = self.block[(a, b)];
                }
            }
            Err(_) => out[i] = 1.0,
        }
        out
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::identity(self.m);
        for (a, &i) in self.support.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
            for (b, &j) in self.support.iter().enumerate() {
                out[(i, j)] = self.block[(a, b)];
            }
        }
        out
    }

    pub fn max_row_error(&self) -> f64 {
        self.block.row_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
    }

    /// `||nu q - nu||_TV`
    pub fn invariance_residual(&self, nu: &DiscreteMeasure) -> f64 {
        let mut out = nu.weights().to_vec();
        for &i in &self.support {
            out[i] = 0.0;
        }
        for (a, &i) in self.support.iter().enumerate() {
            for (b, &j) in self.support.iter().enumerate() {
                out[j] += nu.mass(i) * self.block[(a, b)];
            }
        }
        tv_slices(&out, nu.weights())
    }

    /// `R(nu ⊗ q || nu ⊗ K)`: the cost of this particular invariant kernel,
    /// an upper bound on `I(nu)`.
    pub fn cost(&self, nu: &DiscreteMeasure, k: &MhKernel) -> ExtReal {
        let kmat = k.kernel();
        let mut total = 0.0;
        for (a, &i) in self.support.iter().enumerate() {
            let w = nu.mass(i);
            if w == 0.0 {
                continue;
            }
            for (b, &j) in self.support.iter().enumerate() {
                let q = self.block[(a, b)];
                if q == 0.0 {
                    continue;
                }
                if kmat[(i, j)] <= 0.0 {
                    return ExtReal::Infinite;
                }
                total += w * q * (q / kmat[(i, j)]).ln();
            }
        }
        ExtReal::Finite(total)
    }
}

/// `q^n(c, c') = sum_i ov(c, B_i) ov(c', B_i) / sum_i ov(c, B_i) + (1 - V) 1{c = c'}`,
/// the cell-averaged form of the ball kernel. Rows sum to one and `nu_s^n`
/// is invariant exactly, up to rounding.
pub fn build_q_n(state: &SmoothingState) -> Result<SmoothedKernel> {
    state.check_resolved()?;
    if !(state.volume < 1.0) {
        return Err(Error::Precondition(format!(
            "V_n = {} is not below 1; use a larger n",
            state.volume
        )));
    }
    let coverage = state.coverage();
    let mut support: Vec<usize> = coverage.iter().flat_map(|(_, cells)| cells.iter().map(|c| c.0)).collect();
    support.sort_unstable();
    support.dedup();
    let s = support.len();
    let index = |c: usize| support.binary_search(&c).expect("covered cell");
    let mut block = Matrix::zeros(s, s);
    let mut weight = vec![0.0; s];
    for (count, cells) in &coverage {
        for &(c, ov) in cells {
            weight[index(c)] += *count as f64 * ov;
        }
    }
    for (count, cells) in &coverage {
        for &(c, ov) in cells {
            let a = index(c);
            let f = *count as f64 * ov / weight[a];
            for &(c2, ov2) in cells {
                block[(a, index(c2))] += f * ov2;
            }
        }
    }
    for a in 0..s {
        block[(a, a)] += 1.0 - state.volume;
    }
    Ok(SmoothedKernel { m: state.grid.cells(), support, block })
}

/// `-V log(V/2) + V/n + (1/n) sum_i log(1/r(Y_i)) + 1/n`.
pub fn smoothing_bound(state: &SmoothingState, k: &MhKernel) -> Result<f64> {
    let v = state.volume;
    if !(v < 1.0) {
        return Err(Error::Precondition(format!("V_n = {v} is not below 1")));
    }
    let n = state.n as f64;
    let mut log_inv_r = 0.0;
    for &(c, count) in &state.centers {
        let r = k.rejection()[c];
        if !(r > 0.0) {
            return Err(Error::Precondition(format!("r vanishes at cell {c}")));
        }
        log_inv_r += count as f64 * (1.0 / r).ln();
    }
    Ok(-v * (v / 2.0).ln() + v / n + log_inv_r / n + 1.0 / n)
}

/// `(1 - delta/4) nu_dag + (delta/4) pi`.
pub fn mix_with_target(nu_dag: &DiscreteMeasure, delta: f64, pi: &DiscreteMeasure) -> Result<DiscreteMeasure> {
    if !(delta > 0.0 && delta < 2.0) {
        return Err(Error::Precondition(format!("delta = {delta} must lie in (0, 2)")));
    }
    nu_dag.mix(pi, 1.0 - delta / 4.0)
}

/// One row of a smoothing sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub varrho: f64,
    pub volume: f64,
    pub rate: ExtReal,
    pub bound: f64,
    /// Cost of `q^n` itself, between the rate and the bound.
    pub kernel_cost: ExtReal,
    pub w1_to_nu_s: f64,
    /// `W1` of the draws' empirical measure to `nu_s`.
    pub w1_empirical: f64,
    pub invariance_residual: f64,
    pub mass_error: f64,
    pub row_error: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    /// `sum_k m_k log(1/r(x_k))`
    pub singular_rate: f64,
    /// `|I(nu_s^n) - singular_rate|` at the largest `n`.
    pub final_gap: f64,
    /// `n` values skipped because `V_n >= 1`.
    pub skipped: Vec<usize>,
}

pub fn singular_rate(atoms: &[(usize, f64)], k: &MhKernel) -> ExtReal {
    let mut acc = ExtReal::Finite(0.0);
    for &(c, m) in atoms {
        let r = k.rejection()[c];
        let term = if r > 0.0 { ExtReal::Finite(-r.ln()) } else { ExtReal::Infinite };
        acc = acc + term.scale(m);
    }
    acc
}

fn sweep_row(smoother: &Smoother, sample: &AtomSample, n: usize, opts: &RateOptions) -> Result<Option<SweepRow>> {
    let k = smoother.kernel();
    let space = k.space().clone();
    let state = smoother.varrho_n(sample, n)?;
    if !(state.volume < 1.0) {
        return Ok(None);
    }
    let nu = build_nu_s_n(&state, space.clone())?;
    let q = build_q_n(&state)?;
    let report = rate_primal_sinkhorn(&nu, k, opts)?;
    let nu_s = sample.singular(space.clone())?;
    let emp = sample.empirical(space, n)?;
    let mass: f64 = nu.weights().iter().sum();
    Ok(Some(SweepRow {
        n,
        varrho: state.varrho,
        volume: state.volume,
        rate: report.value,
        bound: smoothing_bound(&state, k)?,
        kernel_cost: q.cost(&nu, k),
        w1_to_nu_s: w1_distance(&nu, &nu_s)?,
        w1_empirical: w1_distance(&emp, &nu_s)?,
        invariance_residual: q.invariance_residual(&nu),
        mass_error: (mass - 1.0).abs(),
        row_error: q.max_row_error(),
        iterations: report.iterations,
    }))
}

/// Runs the construction for every `n` in `ns`, in parallel.
pub fn smoothing_sweep(k: &MhKernel, sample: &AtomSample, ns: &[usize], opts: &RateOptions) -> Result<SweepSummary> {
    let smoother = Smoother::new(k)?;
    let results = ns
        .par_iter()
        .map(|&n| sweep_row(&smoother, sample, n, opts).map(|row| (n, row)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (n, row) in results {
        match row {
            Some(r) => rows.push(r),
            None => skipped.push(n),
        }
    }
    let singular = singular_rate(&sample.atoms, k)
        .finite()
        .ok_or_else(|| Error::Precondition("singular measure has infinite rate".into()))?;
    let final_gap = rows.last().map(|r| (r.rate.to_f64() - singular).abs()).unwrap_or(f64::NAN);
    Ok(SweepSummary { rows, singular_rate: singular, final_gap, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_kernel, ProposalSpec, TargetSpec};
    use crate::measures::{lp_distance, tv_norm};
    use crate::rate::rate_primal_sinkhorn;

    struct Constant;

    impl LocalKernel for Constant {
        fn domain(&self) -> (f64, f64) {
            (0.0, 1.0)
        }
        fn point(&self, x: f64) -> LocalPoint {
            LocalPoint { x, aux: 0.0, rejection: 0.5 }
        }
        fn accept(&self, _: &LocalPoint, _: &LocalPoint) -> f64 {
            0.5
        }
    }

    /// `a(y, z) = 0.5 exp(L (y - x0))`: `|log a(x0,x0) - log a(y,z)| = L |y - x0|`.
    struct Tilted {
        x0: f64,
        l: f64,
    }

    impl LocalKernel for Tilted {
        fn domain(&self) -> (f64, f64) {
            (0.0, 1.0)
        }
        fn point(&self, x: f64) -> LocalPoint {
            LocalPoint { x, aux: 0.0, rejection: 0.5 }
        }
        fn accept(&self, y: &LocalPoint, _: &LocalPoint) -> f64 {
            0.5 * (self.l * (y.x - self.x0)).exp()
        }
    }

    fn gaussian_grid(cells: usize) -> MhKernel {
        let space = Arc::new(StateSpace::grid(0.0, 1.0, cells).unwrap());
        build_kernel(
            &TargetSpec::GaussianMixture { means: vec![0.5], sds: vec![0.15], weights: vec![1.0] },
            &ProposalSpec::RandomWalk { scale: 0.2 },
            space,
        )
        .unwrap()
    }

    #[test]
    fn flat_kernel_hits_the_boundary_cap() {
        let d = delta_eps(&Constant, 0.3, 0.01, 1e-3, None).unwrap();
        assert!((d - 0.3).abs() < 1e-12);
    }

    #[test]
    fn log_lipschitz_fixture() {
        let step = 1e-4;
        for (l, eps) in [(2.0, 0.1), (5.0, 0.05), (10.0, 0.2)] {
            let d = delta_eps(&Tilted { x0: 0.5, l }, 0.5, eps, step, None).unwrap();
            assert!((d - eps / l).abs() <= step + 1e-12, "L={l}: {d} vs {}", eps / l);
        }
    }

    #[test]
    fn delta_is_monotone_in_eps() {
        let k = gaussian_grid(128);
        let local = PointwiseMh::new(&k).unwrap();
        let step = local.grid().width() / 4.0;
        for x in [0.3, 0.5, 0.62] {
            let mut last = f64::INFINITY;
            for eps in [0.4, 0.2, 0.1, 0.05] {
                let d = delta_eps(&local, x, eps, step, None).unwrap();
                assert!(d <= last);
                last = d;
            }
        }
    }

    #[test]
    fn delta_needs_positive_rejection() {
        let space = Arc::new(StateSpace::grid(0.0, 1.0, 32).unwrap());
        let k = build_kernel(&TargetSpec::Uniform, &ProposalSpec::Uniform, space).unwrap();
        let local = PointwiseMh::new(&k).unwrap();
        assert!(matches!(delta_eps(&local, 0.5, 0.1, 0.01, None), Err(Error::Precondition(_))));
    }

    #[test]
    fn single_atom_radius() {
        let k = gaussian_grid(512);
        let cell = 256;
        let sample = AtomSample::draw(vec![(cell, 1.0)], 64, 1).unwrap();
        let smoother = Smoother::new(&k).unwrap();
        for n in [4, 16, 64] {
            let st = smoother.varrho_n(&sample, n).unwrap();
            assert!(st.terms.pair_half.is_none());
            let x = k.space().as_grid().unwrap().center(cell);
            let want = (1.0 / n as f64)
                .min(st.deltas[0])
                .min(0.5 * x.min(1.0 - x))
                .min(st.terms.self_accept);
            assert_eq!(st.varrho, want);
            assert!(st.varrho <= 1.0 / n as f64);
        }
    }

    #[test]
    fn pairwise_term_caps_radius() {
        // Broad target and flat proposal: the acceptance density barely moves
        // between draws 0.4 apart.
        let space = Arc::new(StateSpace::grid(-1.0, 2.0, 3000).unwrap());
        let k = build_kernel(
            &TargetSpec::GaussianMixture { means: vec![0.5], sds: vec![4.0], weights: vec![1.0] },
            &ProposalSpec::Uniform,
            space,
        )
        .unwrap();
        let (c1, c2) = (1300, 1700);
        let sample = AtomSample { atoms: vec![(c1, 0.5), (c2, 0.5)], draws: vec![c1, c2], seed: 0 };
        let st = Smoother::new(&k).unwrap().varrho_n(&sample, 2).unwrap();
        assert!((st.terms.pair_half.unwrap() - 0.2).abs() < 1e-9);
        assert!(st.terms.delta > 0.2 && st.terms.boundary_half > 0.2 && st.terms.inv_n > 0.2);
        assert_eq!(st.varrho, st.terms.pair_half.unwrap());
    }

    #[test]
    fn zero_rejection_draw_is_rejected() {
        let space = Arc::new(StateSpace::grid(0.0, 1.0, 64).unwrap());
        let k = build_kernel(&TargetSpec::Uniform, &ProposalSpec::Uniform, space).unwrap();
        let sample = AtomSample::draw(vec![(32, 1.0)], 4, 0).unwrap();
        assert!(matches!(Smoother::new(&k).unwrap().varrho_n(&sample, 4), Err(Error::Precondition(_))));
    }

    #[test]
    fn one_draw_gives_one_interval() {
        let k = gaussian_grid(512);
        let sample = AtomSample::draw(vec![(256, 1.0)], 1, 3).unwrap();
        let st = Smoother::new(&k).unwrap().varrho_n(&sample, 1).unwrap();
        let nu = build_nu_s_n(&st, k.space().clone()).unwrap();
        let grid = st.grid();
        let y = grid.center(256);
        for c in 0..grid.cells() {
            let x = grid.center(c);
            if (x - y).abs() + grid.width() / 2.0 < st.varrho {
                assert!((nu.mass(c) - grid.width() / st.volume).abs() < 1e-12);
            }
            if (x - y).abs() - grid.width() / 2.0 > st.varrho {
                assert_eq!(nu.mass(c), 0.0);
            }
        }
    }

    #[test]
    fn unresolved_radius_is_reported() {
        let k = gaussian_grid(16);
        let sample = AtomSample::draw(vec![(8, 1.0)], 64, 3).unwrap();
        let st = Smoother::new(&k).unwrap().varrho_n(&sample, 64).unwrap();
        match build_nu_s_n(&st, k.space().clone()) {
            Err(Error::Discretization { suggested_cells, .. }) => assert!(suggested_cells > 16),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn construction_invariants() {
        let k = gaussian_grid(2048);
        let grid = *k.space().as_grid().unwrap();
        let atoms = vec![(grid.cell_of(0.35), 0.3), (grid.cell_of(0.5), 0.4), (grid.cell_of(0.66), 0.3)];
        let sample = AtomSample::draw(atoms, 32, 11).unwrap();
        let smoother = Smoother::new(&k).unwrap();
        for n in [4, 8, 16, 32] {
            let st = smoother.varrho_n(&sample, n).unwrap();
            let nu = build_nu_s_n(&st, k.space().clone()).unwrap();
            assert!((nu.weights().iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let q = build_q_n(&st).unwrap();
            assert!(q.max_row_error() < 1e-12);
            assert!(q.invariance_residual(&nu) < 1e-12);
            // Transport inside the balls costs at most the radius.
            let emp = sample.empirical(k.space().clone(), n).unwrap();
            assert!(w1_distance(&nu, &emp).unwrap() <= st.varrho + 1e-12);
            let bound = smoothing_bound(&st, &k).unwrap();
            let cost = q.cost(&nu, &k).to_f64();
            let rate = rate_primal_sinkhorn(&nu, &k, &RateOptions::default()).unwrap().value.to_f64();
            assert!(rate <= cost + 1e-9, "n={n}: {rate} > {cost}");
            assert!(cost <= bound + 1e-6, "n={n}: {cost} > {bound}");
        }
    }

    #[test]
    fn cell_outside_balls_is_frozen() {
        let k = gaussian_grid(256);
        let sample = AtomSample::draw(vec![(128, 1.0)], 8, 0).unwrap();
        let st = Smoother::new(&k).unwrap().varrho_n(&sample, 8).unwrap();
        let q = build_q_n(&st).unwrap();
        let row = q.row(10);
        assert_eq!(row[10], 1.0);
        assert_eq!(row.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn single_draw_bound_term() {
        // One draw at a state with r = 1/4 contributes log 4 to the bound sum.
        let k = gaussian_grid(256);
        let sample = AtomSample::draw(vec![(128, 1.0)], 1, 0).unwrap();
        let st = Smoother::new(&k).unwrap().varrho_n(&sample, 1).unwrap();
        let r = k.rejection()[128];
        let b = smoothing_bound(&st, &k).unwrap();
        let v = st.volume;
        assert!((b - (-v * (v / 2.0).ln() + v + (1.0 / r).ln() + 1.0)).abs() < 1e-12);
        assert!(((1.0f64 / 0.25).ln() - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn mixing_examples() {
        let space = Arc::new(StateSpace::finite(2).unwrap());
        let k = build_kernel(
            &TargetSpec::Probabilities { probs: vec![2.0 / 3.0, 1.0 / 3.0] },
            &ProposalSpec::Uniform,
            space.clone(),
        )
        .unwrap();
        let pi = DiscreteMeasure::new(space.clone(), k.target().to_vec()).unwrap();
        let dag = DiscreteMeasure::dirac(space.clone(), 0).unwrap();
        let star = mix_with_target(&dag, 0.4, &pi).unwrap();
        let opts = RateOptions::default();
        let i_star = rate_primal_sinkhorn(&star, &k, &opts).unwrap().value.to_f64();
        assert!(i_star <= 0.9 * 0.287682 + 1e-6);
        let tv = tv_norm(&star, &dag).unwrap();
        assert!((tv - 0.1 * tv_norm(&pi, &dag).unwrap()).abs() < 1e-15);
        assert!(lp_distance(&star, &dag).unwrap() <= 0.2 + 1e-15);
        let same = mix_with_target(&pi, 0.4, &pi).unwrap();
        assert!(rate_primal_sinkhorn(&same, &k, &opts).unwrap().value.to_f64() < 1e-12);
        let tiny = mix_with_target(&dag, 1e-9, &pi).unwrap();
        assert!(tv_norm(&tiny, &dag).unwrap() < 1e-9);
        assert!(mix_with_target(&dag, 2.0, &pi).is_err());
        assert!(mix_with_target(&dag, 0.0, &pi).is_err());
    }
}
