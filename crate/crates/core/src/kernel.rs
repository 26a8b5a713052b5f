//! Metropolis-Hastings kernels `K = a + diag(r)` and their diagnostics.
//!
//! On finite spaces the kernel is assembled from a probability vector and a
//! row-stochastic proposal matrix. On grids the target and proposal are
//! density families evaluated at cell centers with the midpoint rule, so
//! `a_ij = a(x_i, x_j) h` and `r_i = 1 - sum_j a_ij`. The same families can
//! be evaluated off-grid through [`ContinuumMh`], which is what the Feller
//! probe and the smoothing radii use.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::ext::ExtReal;
use crate::matrix::Matrix;
use crate::measures::{tv_slices, DiscreteMeasure, Grid1d, StateSpace};

/// Row-sum tolerance for built kernels.
pub const ROW_TOL: f64 = 1e-10;
/// Largest admissible quadrature residual of a proposal row.
pub const QUADRATURE_TOL: f64 = 1e-6;
/// Largest admissible negative rejection mass before clamping is an error.
pub const CLAMP_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TargetSpec {
    /// Finite spaces: the target probability vector.
    Probabilities { probs: Vec<f64> },
    /// Grids: mixture of gaussians truncated to the interval.
    GaussianMixture { means: Vec<f64>, sds: Vec<f64>, weights: Vec<f64> },
    Uniform,
    /// Grids: one density value per cell.
    Table { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ProposalSpec {
    /// Finite spaces: row-stochastic matrix with positive entries.
    Matrix { rows: Vec<Vec<f64>> },
    /// Uniform independence proposal.
    Uniform,
    /// Grids: gaussian random walk renormalized over the interval per row.
    RandomWalk { scale: f64 },
    /// Independence sampler with the given density (or probability vector).
    Independence { density: TargetSpec },
    /// Grids: `rows[i][j]` is the density `J(x_j | x_i)`.
    Table { rows: Vec<Vec<f64>> },
}

/// A complete kernel description, as read from a kernel spec JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub space: Arc<StateSpace>,
    pub target: TargetSpec,
    pub proposal: ProposalSpec,
}

impl KernelSpec {
    pub fn build(&self) -> Result<MhKernel> {
        build_kernel(&self.target, &self.proposal, self.space.clone())
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn gaussian_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

impl TargetSpec {
    fn validate(&self, space: &StateSpace) -> Result<()> {
        let m = space.len();
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        match (self, space) {
            (TargetSpec::Probabilities { probs }, _) => {
                if probs.len() != m {
                    return Err(Error::DimensionMismatch { expected: m, got: probs.len() });
                }
                if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return bad("target probabilities must be finite and nonnegative".into());
                }
                if space.is_grid() && probs.iter().any(|p| *p <= 0.0) {
                    return bad("grid targets must be strictly positive on the interval".into());
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return bad(format!("target probabilities sum to {total}"));
                }
                Ok(())
            }
            (TargetSpec::Uniform, _) => Ok(()),
            (TargetSpec::GaussianMixture { means, sds, weights }, StateSpace::Grid(_)) => {
                if means.is_empty() || means.len() != sds.len() || means.len() != weights.len() {
                    return bad("gaussian mixture needs equally many means, sds and weights".into());
                }
                if sds.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                    return bad("mixture standard deviations must be positive".into());
                }
                if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
                    return bad("mixture weights must be positive".into());
                }
                if means.iter().any(|x| !x.is_finite()) {
                    return bad("mixture means must be finite".into());
                }
                Ok(())
            }
            (TargetSpec::Table { values }, StateSpace::Grid(_)) => {
                if values.len() != m {
                    return Err(Error::DimensionMismatch { expected: m, got: values.len() });
                }
                if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return bad("grid target tables must be strictly positive".into());
                }
                Ok(())
            }
            (_, StateSpace::Finite(_)) => {
                bad("finite spaces take `probabilities` or `uniform` targets".into())
            }
        }
    }

    /// Unnormalized density at `x` (grid families only).
    pub fn density(&self, grid: &Grid1d, x: f64) -> f64 {
        match self {
            TargetSpec::Uniform => 1.0,
            TargetSpec::GaussianMixture { means, sds, weights } => means
                .iter()
                .zip(sds)
                .zip(weights)
                .map(|((&mu, &sd), &w)| w * gaussian_pdf(x, mu, sd))
                .sum(),
            TargetSpec::Table { values } | TargetSpec::Probabilities { probs: values } => {
                values[grid.cell_of(x)]
            }
        }
    }

    /// Integral of [`TargetSpec::density`] over the interval.
    fn integral(&self, grid: &Grid1d) -> f64 {
        match self {
            TargetSpec::Uniform => grid.hi() - grid.lo(),
            TargetSpec::GaussianMixture { means, sds, weights } => means
                .iter()
                .zip(sds)
                .zip(weights)
                .map(|((&mu, &sd), &w)| {
                    w * (std_normal_cdf((grid.hi() - mu) / sd) - std_normal_cdf((grid.lo() - mu) / sd))
                })
                .sum(),
            TargetSpec::Table { values } | TargetSpec::Probabilities { probs: values } => {
                values.iter().sum::<f64>() * grid.width()
            }
        }
    }

    /// The normalized target as a measure on `space`.
    pub fn measure(&self, space: Arc<StateSpace>) -> Result<DiscreteMeasure> {
        self.validate(&space)?;
        let w = self.discretize(&space);
        DiscreteMeasure::from_unnormalized(space, w)
    }

    /// Probability vector on the space: cell masses on grids.
    fn discretize(&self, space: &StateSpace) -> Vec<f64> {
        let m = space.len();
        let raw: Vec<f64> = match (self, space) {
            (TargetSpec::Probabilities { probs }, StateSpace::Finite(_)) => probs.clone(),
            (TargetSpec::Uniform, StateSpace::Finite(_)) => vec![1.0; m],
            (_, StateSpace::Grid(g)) => g.centers().into_iter().map(|x| self.density(g, x)).collect(),
            _ => unreachable!("validated"),
        };
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

impl ProposalSpec {
    fn validate(&self, space: &StateSpace) -> Result<()> {
        let m = space.len();
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        match (self, space) {
            (ProposalSpec::Uniform, _) => Ok(()),
            (ProposalSpec::Matrix { rows }, StateSpace::Finite(_)) => {
                if rows.len() != m {
                    return Err(Error::DimensionMismatch { expected: m, got: rows.len() });
                }
                for (i, row) in rows.iter().enumerate() {
                    if row.len() != m {
                        return Err(Error::DimensionMismatch { expected: m, got: row.len() });
                    }
                    if row.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                        return bad(format!("proposal row {i} must be strictly positive"));
                    }
                    let s: f64 = row.iter().sum();
                    if (s - 1.0).abs() > 1e-9 {
                        return bad(format!("proposal row {i} sums to {s}"));
                    }
                }
                Ok(())
            }
            (ProposalSpec::Independence { density }, StateSpace::Finite(_)) => match density {
                TargetSpec::Probabilities { probs } => {
                    if probs.len() != m {
                        return Err(Error::DimensionMismatch { expected: m, got: probs.len() });
                    }
                    if probs.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                        return bad("independence proposal must be strictly positive".into());
                    }
                    let s: f64 = probs.iter().sum();
                    if (s - 1.0).abs() > 1e-9 {
                        return bad(format!("independence proposal sums to {s}"));
                    }
                    Ok(())
                }
                TargetSpec::Uniform => Ok(()),
                _ => bad("finite independence proposals take probabilities".into()),
            },
            (ProposalSpec::RandomWalk { scale }, StateSpace::Grid(_)) => {
                if !(*scale > 0.0 && scale.is_finite()) {
                    return bad(format!("random-walk scale {scale} must be positive"));
                }
                Ok(())
            }
            (ProposalSpec::Independence { density }, StateSpace::Grid(_)) => {
                if matches!(density, TargetSpec::Probabilities { .. }) {
                    return bad("grid independence proposals take a density family".into());
                }
                density.validate(space)
            }
            (ProposalSpec::Table { rows }, StateSpace::Grid(_)) => {
                if rows.len() != m {
                    return Err(Error::DimensionMismatch { expected: m, got: rows.len() });
                }
                for (i, row) in rows.iter().enumerate() {
                    if row.len() != m {
                        return Err(Error::DimensionMismatch { expected: m, got: row.len() });
                    }
                    if row.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                        return bad(format!("proposal table row {i} must be strictly positive"));
                    }
                }
                Ok(())
            }
            (_, StateSpace::Finite(_)) => bad("unsupported proposal family on a finite space".into()),
            (ProposalSpec::Matrix { .. }, StateSpace::Grid(_)) => {
                bad("grids take random_walk, uniform, independence or table proposals".into())
            }
        }
    }

    /// Unnormalized `J(y | x)` on a grid.
    fn raw(&self, grid: &Grid1d, x: f64, y: f64) -> f64 {
        match self {
            ProposalSpec::Uniform => 1.0,
            ProposalSpec::RandomWalk { scale } => {
                let z = (y - x) / scale;
                (-0.5 * z * z).exp()
            }
            ProposalSpec::Independence { density } => density.density(grid, y),
            ProposalSpec::Table { rows } => rows[grid.cell_of(x)][grid.cell_of(y)],
            ProposalSpec::Matrix { .. } => unreachable!("validated"),
        }
    }

    /// Analytic row integral over the interval, for families that are meant
    /// to be normalized densities already. `None` for families renormalized
    /// per row by construction.
    fn analytic_row_mass(&self, grid: &Grid1d) -> Option<f64> {
        match self {
            ProposalSpec::RandomWalk { .. } | ProposalSpec::Matrix { .. } => None,
            ProposalSpec::Uniform => Some(grid.hi() - grid.lo()),
            ProposalSpec::Independence { density } => Some(density.integral(grid)),
            // Tables are per-cell densities, so each row should integrate to 1.
            ProposalSpec::Table { .. } => Some(1.0),
        }
    }
}

/// Hastings acceptance probability `min{1, pi(y) J(x|y) / (pi(x) J(y|x))}`,
/// with the convention that it equals 1 when `pi(x) J(y|x) = 0`.
pub fn hastings_ratio(target: &[f64], proposal: &Matrix, x: usize, y: usize) -> f64 {
    ratio_from(target[x] * proposal[(x, y)], target[y] * proposal[(y, x)])
}

fn ratio_from(forward: f64, backward: f64) -> f64 {
    if forward <= 0.0 {
        1.0
    } else {
        (backward / forward).min(1.0)
    }
}

/// Anything that can act as a row-stochastic transition matrix on a space.
pub trait StochasticKernel {
    fn space(&self) -> &Arc<StateSpace>;
    fn matrix(&self) -> &Matrix;

    fn len(&self) -> usize {
        self.matrix().rows()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A plain row-stochastic matrix, for fixtures that are not MH kernels.
#[derive(Debug, Clone)]
pub struct MatrixKernel {
    space: Arc<StateSpace>,
    matrix: Matrix,
}

impl MatrixKernel {
    pub fn new(space: Arc<StateSpace>, matrix: Matrix) -> Result<Self> {
        let m = space.len();
        if matrix.rows() != m || matrix.cols() != m {
            return Err(Error::DimensionMismatch { expected: m, got: matrix.rows() });
        }
        for (i, s) in matrix.row_sums().into_iter().enumerate() {
            if (s - 1.0).abs() > ROW_TOL || matrix.row(i).iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidSpec(format!("row {i} is not a probability vector")));
            }
        }
        Ok(MatrixKernel { space, matrix })
    }
}

impl StochasticKernel for MatrixKernel {
    fn space(&self) -> &Arc<StateSpace> {
        &self.space
    }

    fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

/// A built Metropolis-Hastings kernel. Immutable once built.
#[derive(Debug, Clone)]
pub struct MhKernel {
    space: Arc<StateSpace>,
    target: Vec<f64>,
    proposal: Matrix,
    accept: Matrix,
    rejection: Vec<f64>,
    kernel: Matrix,
    clamp_max: f64,
    spec: Option<(TargetSpec, ProposalSpec)>,
}

impl StochasticKernel for MhKernel {
    fn space(&self) -> &Arc<StateSpace> {
        &self.space
    }

    fn matrix(&self) -> &Matrix {
        &self.kernel
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDiagnostics {
    pub row_residual: f64,
    pub reversibility_residual: f64,
    pub clamp_max: f64,
    pub r_max: f64,
    pub indecomposable: bool,
}

/// Builds `K = a + diag(r)` with `a_ij = varpi(x_i, x_j) J(x_j | x_i)` (times
/// `h` on grids).
pub fn build_kernel(target: &TargetSpec, proposal: &ProposalSpec, space: Arc<StateSpace>) -> Result<MhKernel> {
    target.validate(&space)?;
    proposal.validate(&space)?;
    let m = space.len();
    let pi = target.discretize(&space);
    let p = match (&*space, proposal) {
        (StateSpace::Finite(_), ProposalSpec::Matrix { rows }) => {
            let mut p = Matrix::from_rows(rows)?;
            normalize_rows(&mut p);
            p
        }
        (StateSpace::Finite(_), ProposalSpec::Uniform) => Matrix::from_fn(m, m, |_, _| 1.0 / m as f64),
        (StateSpace::Finite(_), ProposalSpec::Independence { density }) => {
            let g = density.discretize(&space);
            Matrix::from_fn(m, m, |_, j| g[j])
        }
        (StateSpace::Grid(g), _) => grid_proposal(g, proposal)?,
        _ => unreachable!("validated"),
    };
    let mut k = MhKernel::assemble(space, pi, p)?;
    k.spec = Some((target.clone(), proposal.clone()));
    Ok(k)
}

fn normalize_rows(p: &mut Matrix) {
    for i in 0..p.rows() {
        let s: f64 = p.row(i).iter().sum();
        p.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
}

/// Discretized proposal `P_ij = J(x_j | x_i) h`, renormalized per row after
/// checking the quadrature residual of families that claim to be normalized.
fn grid_proposal(g: &Grid1d, proposal: &ProposalSpec) -> Result<Matrix> {
    let m = g.cells();
    let h = g.width();
    let xs = g.centers();
    let mut p = Matrix::from_fn(m, m, |i, j| proposal.raw(g, xs[i], xs[j]));
    let mut worst = 0.0f64;
    if let Some(mass) = proposal.analytic_row_mass(g) {
        for i in 0..m {
            let row_sum: f64 = p.row(i).iter().sum::<f64>() * h;
            worst = worst.max((row_sum / mass - 1.0).abs());
        }
    }
    if worst > QUADRATURE_TOL {
        // Midpoint error is second order in h.
        let factor = (worst / QUADRATURE_TOL).sqrt() * 1.1;
        return Err(Error::Discretization {
            message: format!("proposal row quadrature residual {worst:e} exceeds {QUADRATURE_TOL:e}"),
            suggested_cells: (m as f64 * factor).ceil() as usize,
        });
    }
    normalize_rows(&mut p);
    Ok(p)
}

impl MhKernel {
    /// Assembles the kernel from a discrete target and proposal matrix.
    /// Useful for hand-built fixtures; the proposal must be row-stochastic.
    pub fn from_discrete(space: Arc<StateSpace>, target: Vec<f64>, proposal: Matrix) -> Result<Self> {
        let m = space.len();
        if target.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: target.len() });
        }
        if proposal.rows() != m || proposal.cols() != m {
            return Err(Error::DimensionMismatch { expected: m, got: proposal.rows() });
        }
        let total: f64 = target.iter().sum();
        if target.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec("target must be a probability vector".into()));
        }
        for (i, s) in proposal.row_sums().into_iter().enumerate() {
            if (s - 1.0).abs() > 1e-9 || proposal.row(i).iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidSpec(format!("proposal row {i} is not a probability vector")));
            }
        }
        MhKernel::assemble(space, target, proposal)
    }

    fn assemble(space: Arc<StateSpace>, target: Vec<f64>, proposal: Matrix) -> Result<Self> {
        let m = space.len();
        let mut accept = Matrix::zeros(m, m);
        let mut rejection = vec![0.0; m];
        let mut clamp_max = 0.0f64;
        for i in 0..m {
            let mut row_sum = 0.0;
            for j in 0..m {
                let a = if i == j {
                    proposal[(i, i)]
                } else {
                    hastings_ratio(&target, &proposal, i, j) * proposal[(i, j)]
                };
                accept[(i, j)] = a;
                row_sum += a;
            }
            let r = 1.0 - row_sum;
            if r < 0.0 {
                clamp_max = clamp_max.max(-r);
            }
            rejection[i] = r.max(0.0);
        }
        if clamp_max > CLAMP_TOL {
            return Err(Error::Discretization {
                message: format!("negative rejection mass {clamp_max:e} after clamping"),
                suggested_cells: 2 * m,
            });
        }
        let mut kernel = accept.clone();
        for (i, r) in rejection.iter().enumerate() {
            kernel[(i, i)] += r;
        }
        Ok(MhKernel { space, target, proposal, accept, rejection, kernel, clamp_max, spec: None })
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn proposal(&self) -> &Matrix {
        &self.proposal
    }

    /// Acceptance part `a` (cell masses on grids).
    pub fn accept(&self) -> &Matrix {
        &self.accept
    }

    pub fn rejection(&self) -> &[f64] {
        &self.rejection
    }

    pub fn kernel(&self) -> &Matrix {
        &self.kernel
    }

    pub fn width(&self) -> Option<f64> {
        self.space.width()
    }

    /// `a(x_i, x_j)` as a density on grids, as a probability on finite spaces.
    pub fn accept_density(&self, i: usize, j: usize) -> f64 {
        self.accept[(i, j)] / self.width().unwrap_or(1.0)
    }

    pub fn ratio(&self, i: usize, j: usize) -> f64 {
        if i == j {
            1.0
        } else {
            hastings_ratio(&self.target, &self.proposal, i, j)
        }
    }

    pub fn clamp_max(&self) -> f64 {
        self.clamp_max
    }

    pub fn r_max(&self) -> f64 {
        self.rejection.iter().cloned().fold(0.0, f64::max)
    }

    /// States with positive target mass.
    pub fn positive_set(&self) -> Vec<usize> {
        (0..self.target.len()).filter(|&i| self.target[i] > 0.0).collect()
    }

    pub fn specs(&self) -> Option<(&TargetSpec, &ProposalSpec)> {
        self.spec.as_ref().map(|(t, p)| (t, p))
    }

    /// Off-grid evaluation of the same target/proposal families.
    pub fn continuum(&self) -> Result<ContinuumMh> {
        let grid = *self
            .space
            .as_grid()
            .ok_or_else(|| Error::Precondition("continuum evaluation needs a grid space".into()))?;
        let (t, p) = self
            .spec
            .clone()
            .ok_or_else(|| Error::Precondition("kernel was not built from family specs".into()))?;
        Ok(ContinuumMh { grid, target: t, proposal: p })
    }

    pub fn diagnostics(&self) -> KernelDiagnostics {
        let m = self.space.len();
        let row_residual = self.kernel.row_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        let mut rev = 0.0f64;
        for i in 0..m {
            for j in 0..i {
                let d = (self.target[i] * self.accept[(i, j)] - self.target[j] * self.accept[(j, i)]).abs();
                rev = rev.max(d);
            }
        }
        KernelDiagnostics {
            row_residual,
            reversibility_residual: rev,
            clamp_max: self.clamp_max,
            r_max: self.r_max(),
            indecomposable: check_indecomposable(&self.kernel).indecomposable,
        }
    }
}

/// `||pi K - pi||_TV` for the kernel's own discrete target.
pub fn check_invariance(k: &MhKernel) -> f64 {
    tv_slices(&k.kernel.left_mul(&k.target), &k.target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IndecomposabilityCertificate {
    /// BFS parent edges from state 0 along and against the positive entries;
    /// together they show every state reaches and is reached from state 0.
    Connected { forward: Vec<(usize, usize)>, backward: Vec<(usize, usize)> },
    /// A nonempty closed set no path leaves, and its complement.
    Split { closed: Vec<usize>, rest: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Indecomposability {
    pub indecomposable: bool,
    pub certificate: IndecomposabilityCertificate,
}

fn bfs(m: usize, edge: impl Fn(usize, usize) -> bool) -> (Vec<bool>, Vec<(usize, usize)>) {
    let mut seen = vec![false; m];
    let mut tree = Vec::new();
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for v in 0..m {
            if !seen[v] && edge(u, v) {
                seen[v] = true;
                tree.push((u, v));
                queue.push_back(v);
            }
        }
    }
    (seen, tree)
}

/// Strong connectivity of the graph of positive entries, which rules out a
/// decomposition into two disjoint closed sets.
pub fn check_indecomposable(k: &Matrix) -> Indecomposability {
    let m = k.rows();
    let (fwd, ftree) = bfs(m, |u, v| k[(u, v)] > 0.0);
    let (bwd, btree) = bfs(m, |u, v| k[(v, u)] > 0.0);
    let split = |closed_mask: &[bool]| {
        let closed = (0..m).filter(|&i| closed_mask[i]).collect();
        let rest = (0..m).filter(|&i| !closed_mask[i]).collect();
        Indecomposability { indecomposable: false, certificate: IndecomposabilityCertificate::Split { closed, rest } }
    };
    if fwd.iter().any(|s| !s) {
        return split(&fwd);
    }
    if bwd.iter().any(|s| !s) {
        // States that cannot reach 0 form a closed set.
        let cannot: Vec<bool> = bwd.iter().map(|s| !s).collect();
        return split(&cannot);
    }
    Indecomposability {
        indecomposable: true,
        certificate: IndecomposabilityCertificate::Connected { forward: ftree, backward: btree },
    }
}

/// A kernel that can integrate test functions from arbitrary points.
pub trait ContinuumKernel {
    /// `int f(y) K(x, dy)`
    fn expect(&self, x: f64, f: &dyn Fn(f64) -> f64) -> f64;
}

/// Target and proposal families evaluated off the grid, with midpoint
/// quadrature on the grid for every integral over the state space. At cell
/// centers it reproduces the built kernel exactly.
#[derive(Debug, Clone)]
pub struct ContinuumMh {
    grid: Grid1d,
    target: TargetSpec,
    proposal: ProposalSpec,
}

impl ContinuumMh {
    pub fn grid(&self) -> &Grid1d {
        &self.grid
    }

    pub fn target_density(&self, x: f64) -> f64 {
        self.target.density(&self.grid, x)
    }

    /// `int J_raw(y | x) dy` by the midpoint rule.
    pub fn proposal_norm(&self, x: f64) -> f64 {
        let h = self.grid.width();
        (0..self.grid.cells()).map(|k| self.proposal.raw(&self.grid, x, self.grid.center(k))).sum::<f64>() * h
    }

    pub fn proposal_density(&self, x: f64, y: f64) -> f64 {
        self.proposal.raw(&self.grid, x, y) / self.proposal_norm(x)
    }

    /// `a(x, y)` given precomputed proposal norms at `x` and `y`.
    pub fn accept_with_norms(&self, x: f64, y: f64, norm_x: f64, norm_y: f64) -> f64 {
        let fwd = self.proposal.raw(&self.grid, x, y) / norm_x;
        if x == y {
            return fwd;
        }
        let back = self.proposal.raw(&self.grid, y, x) / norm_y;
        ratio_from(self.target_density(x) * fwd, self.target_density(y) * back) * fwd
    }

    pub fn accept_density(&self, x: f64, y: f64) -> f64 {
        self.accept_with_norms(x, y, self.proposal_norm(x), self.proposal_norm(y))
    }

    fn accept_row(&self, x: f64) -> Vec<f64> {
        let nx = self.proposal_norm(x);
        (0..self.grid.cells())
            .map(|k| {
                let y = self.grid.center(k);
                self.accept_with_norms(x, y, nx, self.proposal_norm(y))
            })
            .collect()
    }

    /// `r(x) = 1 - int a(x, y) dy`, clamped at zero.
    pub fn rejection(&self, x: f64) -> f64 {
        let h = self.grid.width();
        (1.0 - self.accept_row(x).iter().sum::<f64>() * h).max(0.0)
    }

    /// Rejection from a precomputed table of proposal norms at the centers.
    pub(crate) fn rejection_with_norms(&self, x: f64, center_norms: &[f64]) -> f64 {
        let h = self.grid.width();
        let nx = self.proposal_norm(x);
        let s: f64 = (0..self.grid.cells())
            .map(|k| self.accept_with_norms(x, self.grid.center(k), nx, center_norms[k]))
            .sum();
        (1.0 - s * h).max(0.0)
    }

    pub(crate) fn center_norms(&self) -> Vec<f64> {
        self.grid.centers().into_iter().map(|x| self.proposal_norm(x)).collect()
    }
}

impl ContinuumKernel for ContinuumMh {
    fn expect(&self, x: f64, f: &dyn Fn(f64) -> f64) -> f64 {
        let h = self.grid.width();
        let row = self.accept_row(x);
        let accepted: f64 = row.iter().enumerate().map(|(k, a)| a * f(self.grid.center(k))).sum::<f64>() * h;
        let r = (1.0 - row.iter().sum::<f64>() * h).max(0.0);
        accepted + r * f(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FellerReport {
    /// `|int f dK(x_n, .) - int f dK(x, .)|` for every point of the sequence.
    pub deviations: Vec<f64>,
    pub max_after_burn_in: f64,
}

/// Measures how far `x_n -> x` moves the integral of a bounded test function.
pub fn feller_probe(
    kernel: &dyn ContinuumKernel,
    x: f64,
    sequence: &[f64],
    f: &dyn Fn(f64) -> f64,
    burn_in: usize,
) -> FellerReport {
    let base = kernel.expect(x, f);
    let deviations: Vec<f64> = sequence.iter().map(|&xn| (kernel.expect(xn, f) - base).abs()).collect();
    let max_after_burn_in = deviations.iter().skip(burn_in).cloned().fold(0.0, f64::max);
    FellerReport { deviations, max_after_burn_in }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionWitness {
    /// State carrying a rejection atom.
    pub state: usize,
    /// Another state; its absolutely continuous mass onto `{state}` vanishes
    /// in the continuum model.
    pub zeta: usize,
    pub rejection: f64,
    /// Discrete mass `a(zeta, state)` (times `h` on grids).
    pub atom_from_zeta: f64,
    /// `(i, K^i(x, {x}), r(x)^i)` for `i = 1..=8`.
    pub powers: Vec<(usize, f64, f64)>,
}

/// Finds the rejection atom that breaks the uniform transitivity condition
/// used by earlier large-deviation results.
pub fn condition_de_witness(k: &MhKernel) -> Result<ConditionWitness> {
    let (state, rejection) = k
        .rejection
        .iter()
        .cloned()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty kernel");
    if rejection <= 1e-12 {
        return Err(Error::Precondition("condition not violated by this instance: r is identically 0".into()));
    }
    let m = k.space.len();
    let zeta = (0..m)
        .filter(|&j| j != state)
        .max_by(|&a, &b| k.accept[(a, state)].total_cmp(&k.accept[(b, state)]))
        .expect("at least two states");
    let mut powers = Vec::with_capacity(8);
    let mut row = vec![0.0; m];
    row[state] = 1.0;
    for i in 1..=8 {
        row = k.kernel.left_mul(&row);
        powers.push((i, row[state], rejection.powi(i as i32)));
    }
    Ok(ConditionWitness { state, zeta, rejection, atom_from_zeta: k.accept[(zeta, state)], powers })
}

/// Default drift `b(x) = int y a(x, dy) - (1 - r(x)) x` at every cell.
pub fn default_drift(k: &MhKernel) -> Result<Vec<f64>> {
    let g = *k
        .space
        .as_grid()
        .ok_or_else(|| Error::Precondition("the Lyapunov tilt is defined on grids".into()))?;
    let xs = g.centers();
    Ok((0..xs.len())
        .map(|i| {
            let mean: f64 = k.accept.row(i).iter().zip(&xs).map(|(a, y)| a * y).sum();
            mean - (1.0 - k.rejection[i]) * xs[i]
        })
        .collect())
}

/// `H_b(x, alpha) = log[ sum_j e^{alpha (x_j - x - b(x))} a(x, x_j) h + r(x) e^{-alpha b(x)} ]`.
pub fn lyapunov_hb(k: &MhKernel, drift: Option<&[f64]>, state: usize, alpha: f64) -> Result<ExtReal> {
    let g = *k
        .space
        .as_grid()
        .ok_or_else(|| Error::Precondition("the Lyapunov tilt is defined on grids".into()))?;
    let owned;
    let b = match drift {
        Some(b) => b,
        None => {
            owned = default_drift(k)?;
            &owned
        }
    };
    if b.len() != g.cells() {
        return Err(Error::DimensionMismatch { expected: g.cells(), got: b.len() });
    }
    let x = g.center(state);
    let bx = b[state];
    let mut exps: Vec<f64> = k
        .accept
        .row(state)
        .iter()
        .enumerate()
        .filter(|(_, a)| **a > 0.0)
        .map(|(j, a)| alpha * (g.center(j) - x - bx) + a.ln())
        .collect();
    if k.rejection[state] > 0.0 {
        exps.push(-alpha * bx + k.rejection[state].ln());
    }
    let top = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let value = top + exps.iter().map(|e| (e - top).exp()).sum::<f64>().ln();
    Ok(if value.is_finite() { ExtReal::Finite(value) } else { ExtReal::Infinite })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_state() -> MhKernel {
        let space = Arc::new(StateSpace::finite(2).unwrap());
        build_kernel(
            &TargetSpec::Probabilities { probs: vec![2.0 / 3.0, 1.0 / 3.0] },
            &ProposalSpec::Uniform,
            space,
        )
        .unwrap()
    }

    fn gaussian_grid(m: usize) -> MhKernel {
        let space = Arc::new(StateSpace::grid(0.0, 1.0, m).unwrap());
        build_kernel(
            &TargetSpec::GaussianMixture { means: vec![0.3, 0.7], sds: vec![0.1, 0.15], weights: vec![0.6, 0.4] },
            &ProposalSpec::RandomWalk { scale: 0.25 },
            space,
        )
        .unwrap()
    }

    #[test]
    fn hastings_ratio_examples() {
        let p = Matrix::from_fn(2, 2, |_, _| 0.5);
        assert_eq!(hastings_ratio(&[1.0 / 3.0, 2.0 / 3.0], &p, 0, 1), 1.0);
        assert!((hastings_ratio(&[2.0 / 3.0, 1.0 / 3.0], &p, 0, 1) - 0.5).abs() < 1e-15);
        assert_eq!(hastings_ratio(&[0.0, 1.0], &p, 0, 1), 1.0);
    }

    #[test]
    fn two_state_hand_values() {
        let k = two_state();
        let want_a = [[0.5, 0.25], [0.5, 0.5]];
        let want_k = [[0.75, 0.25], [0.5, 0.5]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((k.accept()[(i, j)] - want_a[i][j]).abs() < 1e-15);
                assert!((k.kernel()[(i, j)] - want_k[i][j]).abs() < 1e-15);
            }
        }
        assert!((k.rejection()[0] - 0.25).abs() < 1e-15);
        assert_eq!(k.rejection()[1], 0.0);
        let pk = k.kernel().left_mul(k.target());
        assert!((pk[0] - 2.0 / 3.0).abs() < 1e-15 && (pk[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(check_invariance(&k) < 1e-15);
        assert!(check_indecomposable(k.kernel()).indecomposable);
    }

    #[test]
    fn uniform_target_symmetric_proposal_has_no_rejection() {
        let space = Arc::new(StateSpace::finite(3).unwrap());
        let rows = vec![vec![0.5, 0.25, 0.25], vec![0.25, 0.5, 0.25], vec![0.25, 0.25, 0.5]];
        let k = build_kernel(&TargetSpec::Uniform, &ProposalSpec::Matrix { rows: rows.clone() }, space).unwrap();
        assert_eq!(k.kernel().to_rows(), rows);
        assert!(k.rejection().iter().all(|r| *r == 0.0));
        assert_eq!(check_invariance(&k), 0.0);
        assert!(condition_de_witness(&k).is_err());
    }

    #[test]
    fn grid_kernel_invariants() {
        let k = gaussian_grid(128);
        let d = k.diagnostics();
        assert!(d.row_residual <= ROW_TOL);
        assert!(d.reversibility_residual <= 1e-8);
        assert!(d.indecomposable);
        assert!(d.r_max > 0.0);
        let w = condition_de_witness(&k).unwrap();
        assert_eq!(w.rejection, d.r_max);
        for (_, kii, ri) in &w.powers {
            assert!(kii >= ri);
        }
    }

    #[test]
    fn grid_invariance_residual_is_tiny_under_refinement() {
        for m in [32, 64] {
            assert!(check_invariance(&gaussian_grid(m)) < 1e-12);
        }
    }

    #[test]
    fn rejection_jumps_shrink_with_h() {
        let jump = |m| {
            let k = gaussian_grid(m);
            k.rejection().windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
        };
        let (j1, j2) = (jump(64), jump(128));
        let ratio = j1 / j2;
        assert!((1.6..2.4).contains(&ratio), "jump ratio {ratio}");
    }

    #[test]
    fn continuum_reproduces_grid_at_centers() {
        let k = gaussian_grid(40);
        let c = k.continuum().unwrap();
        let g = *k.space().as_grid().unwrap();
        let h = g.width();
        for (i, j) in [(0, 0), (3, 17), (25, 9), (39, 38)] {
            let a = c.accept_density(g.center(i), g.center(j)) * h;
            assert!((a - k.accept()[(i, j)]).abs() < 1e-14, "({i},{j})");
        }
        assert!((c.rejection(g.center(11)) - k.rejection()[11]).abs() < 1e-12);
    }

    #[test]
    fn independence_quadrature_residual_is_checked() {
        let space = Arc::new(StateSpace::grid(0.0, 1.0, 8).unwrap());
        let narrow = ProposalSpec::Independence {
            density: TargetSpec::GaussianMixture { means: vec![0.5], sds: vec![0.05], weights: vec![1.0] },
        };
        let err = build_kernel(&TargetSpec::Uniform, &narrow, space).unwrap_err();
        match err {
            Error::Discretization { suggested_cells, .. } => assert!(suggested_cells > 8),
            e => panic!("unexpected {e}"),
        }
        let fine = Arc::new(StateSpace::grid(0.0, 1.0, 2000).unwrap());
        assert!(build_kernel(&TargetSpec::Uniform, &narrow, fine).is_ok());
    }

    #[test]
    fn invalid_specs_rejected() {
        let space = Arc::new(StateSpace::finite(2).unwrap());
        let zero = ProposalSpec::Matrix { rows: vec![vec![1.0, 0.0], vec![0.5, 0.5]] };
        assert!(build_kernel(&TargetSpec::Uniform, &zero, space.clone()).is_err());
        let rw = ProposalSpec::RandomWalk { scale: 0.1 };
        assert!(build_kernel(&TargetSpec::Uniform, &rw, space).is_err());
    }

    #[test]
    fn indecomposable_block_fixture() {
        let k = Matrix::from_rows(&[
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 0.3, 0.7],
            vec![0.0, 0.0, 0.6, 0.4],
        ])
        .unwrap();
        let res = check_indecomposable(&k);
        assert!(!res.indecomposable);
        assert_eq!(
            res.certificate,
            IndecomposabilityCertificate::Split { closed: vec![0, 1], rest: vec![2, 3] }
        );
        let full = Matrix::from_fn(3, 3, |_, _| 1.0 / 3.0);
        assert!(check_indecomposable(&full).indecomposable);
    }

    struct JumpKernel;

    impl ContinuumKernel for JumpKernel {
        fn expect(&self, x: f64, f: &dyn Fn(f64) -> f64) -> f64 {
            if x < 0.5 {
                f(0.0)
            } else {
                f(1.0)
            }
        }
    }

    #[test]
    fn feller_probe_on_mh_and_jump_fixture() {
        let k = gaussian_grid(256);
        let c = k.continuum().unwrap();
        let x = 0.4;
        let seq: Vec<f64> = (1..=12).map(|n| x + 2f64.powi(-n)).collect();
        let constant = feller_probe(&c, x, &seq, &|_| 1.0, 0);
        assert!(constant.max_after_burn_in < 1e-12);
        let identity = feller_probe(&c, x, &seq, &|y| y, 0);
        let d = &identity.deviations;
        assert!(d.windows(2).all(|w| w[1] <= w[0] * 0.75 + 1e-12), "{d:?}");
        assert!(*d.last().unwrap() < 1e-3);

        let jump_seq: Vec<f64> = (1..=12).map(|n| 0.5 - 2f64.powi(-n)).collect();
        let jump = feller_probe(&JumpKernel, 0.5, &jump_seq, &|y| y, 4);
        assert!(jump.max_after_burn_in >= 1.0 - 1e-12);
    }

    #[test]
    fn witness_on_two_state() {
        let w = condition_de_witness(&two_state()).unwrap();
        assert_eq!((w.state, w.zeta), (0, 1));
        assert!((w.rejection - 0.25).abs() < 1e-15);
    }

    #[test]
    fn lyapunov_tilt() {
        let k = gaussian_grid(64);
        assert!(lyapunov_hb(&k, None, 10, 0.0).unwrap().to_f64().abs() < 1e-12);
        for alpha in [-50.0, -1.0, 3.0, 80.0] {
            assert!(lyapunov_hb(&k, None, 30, alpha).unwrap().is_finite());
        }
        assert!(lyapunov_hb(&two_state(), None, 0, 1.0).is_err());
    }

    #[test]
    fn lyapunov_two_cell_hand_expansion() {
        // Two cells on [0, 1], centers 1/4 and 3/4.
        let space = Arc::new(StateSpace::grid(0.0, 1.0, 2).unwrap());
        let k = build_kernel(
            &TargetSpec::Table { values: vec![1.5, 0.5] },
            &ProposalSpec::Uniform,
            space,
        )
        .unwrap();
        // pi = (3/4, 1/4); J = 1/2 each; a = [[.5, .5/3], [.5, .5]], r = (1/3, 0).
        let a: [[f64; 2]; 2] = [[0.5, 0.5 / 3.0], [0.5, 0.5]];
        let r: [f64; 2] = [1.0 / 3.0, 0.0];
        let xs: [f64; 2] = [0.25, 0.75];
        let b0 = a[0][0] * xs[0] + a[0][1] * xs[1] - (1.0 - r[0]) * xs[0];
        let alpha = 0.7;
        let hand = (a[0][0] * (alpha * (xs[0] - xs[0] - b0)).exp()
            + a[0][1] * (alpha * (xs[1] - xs[0] - b0)).exp()
            + r[0] * (-alpha * b0).exp())
        .ln();
        let got = lyapunov_hb(&k, None, 0, alpha).unwrap().to_f64();
        assert!((got - hand).abs() < 1e-14, "{got} vs {hand}");
        assert!((default_drift(&k).unwrap()[0] - b0).abs() < 1e-15);
    }

    #[test]
    fn kernel_spec_json() {
        let json = r#"{
            "space": {"kind": "grid1d", "lo": 0.0, "hi": 1.0, "cells": 16},
            "target": {"family": "gaussian_mixture", "means": [0.5], "sds": [0.2], "weights": [1.0]},
            "proposal": {"family": "random_walk", "scale": 0.3}
        }"#;
        let spec: KernelSpec = serde_json::from_str(json).unwrap();
        let k = spec.build().unwrap();
        assert_eq!(k.len(), 16);
        let diag = serde_json::to_value(k.diagnostics()).unwrap();
        for key in ["row_residual", "reversibility_residual", "clamp_max", "r_max", "indecomposable"] {
            assert!(diag.get(key).is_some());
        }
    }
}
