//! The rate function of the empirical measure,
//!
//! ```text
//! I(nu) = inf { R(gamma || nu ⊗ K) : gamma has both marginals equal to nu },
//! ```
//!
//! computed as an entropic projection of the reference `nu_i K_ij` onto the
//! two marginal constraints by iterative proportional fitting. The optimal
//! coupling yields the optimal `nu`-invariant kernel `q* = gamma*/nu`, which
//! is split into an acceptance-like part and a retention part.
//!
//! Independent routes used as cross-checks: the Donsker-Varadhan dual
//! `sup_u sum nu log(u / Ku)`, the split form of the rate, and the Perron
//! eigenvalue of the tilted kernel (Legendre duality).

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ext::ExtReal;
use crate::kernel::{MhKernel, StochasticKernel};
use crate::matrix::Matrix;
use crate::measures::{same_space, tv_slices, DiscreteMeasure, HybridMeasure};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateOptions {
    /// Marginal TV tolerance of the Sinkhorn solve.
    pub tol: f64,
    pub max_iter: usize,
    /// Allowed primal-dual gap.
    pub gap_tol: f64,
    /// Relative tolerance of the Perron eigenvalue.
    pub power_tol: f64,
    pub power_max_iter: usize,
}

impl Default for RateOptions {
    fn default() -> Self {
        RateOptions { tol: 1e-10, max_iter: 100_000, gap_tol: 1e-6, power_tol: 1e-12, power_max_iter: 1_000_000 }
    }
}

/// A joint measure on `S x S`, stored on `support x support`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    m: usize,
    support: Vec<usize>,
    block: Matrix,
    row_marginal: Vec<f64>,
    col_marginal: Vec<f64>,
}

impl Coupling {
    pub fn new(m: usize, support: Vec<usize>, block: Matrix) -> Result<Self> {
        let s = support.len();
        if block.rows() != s || block.cols() != s {
            return Err(Error::DimensionMismatch { expected: s, got: block.rows() });
        }
        if support.iter().any(|&i| i >= m) || support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidMeasure("coupling support must be sorted distinct states".into()));
        }
        if block.as_slice().iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidMeasure("coupling entries must be nonnegative".into()));
        }
        let total: f64 = block.as_slice().iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMeasure(format!("coupling mass {total} is not 1")));
        }
        let mut row_marginal = vec![0.0; m];
        let mut col_marginal = vec![0.0; m];
        for (a, &i) in support.iter().enumerate() {
            row_marginal[i] = block.row(a).iter().sum();
        }
        for (b, v) in block.col_sums().into_iter().enumerate() {
            col_marginal[support[b]] = v;
        }
        Ok(Coupling { m, support, block, row_marginal, col_marginal })
    }

    pub fn from_dense(dense: &Matrix) -> Result<Self> {
        let m = dense.rows();
        if !dense.is_square() {
            return Err(Error::DimensionMismatch { expected: m, got: dense.cols() });
        }
        let rows = dense.row_sums();
        let cols = dense.col_sums();
        let support: Vec<usize> = (0..m).filter(|&i| rows[i] > 0.0 || cols[i] > 0.0).collect();
        Coupling::new(m, support.clone(), dense.select(&support, &support))
    }

    /// `nu ⊗ q` for a kernel given on the support of `nu`.
    pub fn product(nu: &DiscreteMeasure, q: &Matrix) -> Result<Self> {
        let support = nu.support();
        let m = nu.len();
        if q.rows() != m || q.cols() != m {
            return Err(Error::DimensionMismatch { expected: m, got: q.rows() });
        }
        for &i in &support {
            let outside: f64 = (0..m).filter(|j| nu.mass(*j) == 0.0).map(|j| q[(i, j)]).sum();
            if outside > 0.0 {
                return Err(Error::Precondition(format!("row {i} leaves the support of nu")));
            }
        }
        let block = Matrix::from_fn(support.len(), support.len(), |a, b| nu.mass(support[a]) * q[(support[a], support[b])]);
        Coupling::new(m, support, block)
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn block(&self) -> &Matrix {
        &self.block
    }

    pub fn row_marginal(&self) -> &[f64] {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &[f64] {
        &self.col_marginal
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match (self.support.binary_search(&i), self.support.binary_search(&j)) {
            (Ok(a), Ok(b)) => self.block[(a, b)],
            _ => 0.0,
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.m, self.m);
        for (a, &i) in self.support.iter().enumerate() {
            for (b, &j) in self.support.iter().enumerate() {
                out[(i, j)] = self.block[(a, b)];
            }
        }
        out
    }

    /// `R(gamma || mu ⊗ K)`.
    pub fn relative_entropy<K: StochasticKernel + ?Sized>(&self, mu: &DiscreteMeasure, k: &K) -> Result<ExtReal> {
        if mu.len() != self.m || k.len() != self.m {
            return Err(Error::DimensionMismatch { expected: self.m, got: mu.len() });
        }
        let kmat = k.matrix();
        let mut acc = 0.0;
        for (a, &i) in self.support.iter().enumerate() {
            for (b, &j) in self.support.iter().enumerate() {
                let g = self.block[(a, b)];
                if g == 0.0 {
                    continue;
                }
                let reference = mu.mass(i) * kmat[(i, j)];
                if reference <= 0.0 {
                    return Ok(ExtReal::Infinite);
                }
                acc += g * (g / reference).ln();
            }
        }
        Ok(ExtReal::Finite(acc.max(0.0)))
    }

    /// TV distances of both marginals to `nu`.
    pub fn marginal_residuals(&self, nu: &DiscreteMeasure) -> (f64, f64) {
        (tv_slices(&self.row_marginal, nu.weights()), tv_slices(&self.col_marginal, nu.weights()))
    }
}

/// Why a rate is infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InfiniteCertificate {
    /// A state of `supp(nu)` cannot move anywhere inside `supp(nu)`.
    NoExit { state: usize },
    /// A state of `supp(nu)` cannot be entered from inside `supp(nu)`.
    NoEntry { state: usize },
    /// `nu` charges `x` but `K(x, x) = 0`.
    NoSelfLoop { state: usize },
    /// Split puts mass where the reference kernel has none.
    Support { from: usize, to: usize },
}

/// The optimal kernel `q* = gamma*/nu` on `supp(nu)`; rows outside the
/// support are undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedKernel {
    m: usize,
    support: Vec<usize>,
    block: Matrix,
}

impl ExtractedKernel {
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn block(&self) -> &Matrix {
        &self.block
    }

    /// Full row `q(i, .)`, or `None` when `i` is outside the support.
    pub fn row(&self, i: usize) -> Option<Vec<f64>> {
        let a = self.support.binary_search(&i).ok()?;
        let mut out = vec![0.0; self.m];
        for (b, &j) in self.support.iter().enumerate() {
            out[j] = self.block[(a, b)];
        }
        Some(out)
    }

    /// Dense matrix with identity rows outside the support.
    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::identity(self.m);
        for &i in &self.support {
            out.row_mut(i).copy_from_slice(&self.row(i).expect("support row"));
        }
        out
    }

    /// `||nu q - nu||_TV`
    pub fn invariance_residual(&self, nu: &DiscreteMeasure) -> f64 {
        let mut out = vec![0.0; self.m];
        for (a, &i) in self.support.iter().enumerate() {
            for (b, &j) in self.support.iter().enumerate() {
                out[j] += nu.mass(i) * self.block[(a, b)];
            }
        }
        tv_slices(&out, nu.weights())
    }
}

/// `q = alpha + diag(rho)` on `supp(nu)`: `alpha` is absolutely continuous
/// with respect to the acceptance part, `rho` with respect to the rejection.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitKernel {
    support: Vec<usize>,
    alpha: Matrix,
    rho: Vec<f64>,
}

impl SplitKernel {
    /// `alpha` is `support x support`; mass leaving the support is not
    /// representable, since `nu q = nu` forbids it.
    pub fn new(support: Vec<usize>, alpha: Matrix, rho: Vec<f64>) -> Result<Self> {
        let s = support.len();
        if alpha.rows() != s || alpha.cols() != s || rho.len() != s {
            return Err(Error::DimensionMismatch { expected: s, got: alpha.rows() });
        }
        if alpha.as_slice().iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidSpec("alpha must be nonnegative".into()));
        }
        if rho.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidSpec("rho must lie in [0, 1]".into()));
        }
        for a in 0..s {
            let total: f64 = alpha.row(a).iter().sum::<f64>() + rho[a];
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidSpec(format!("split row {} sums to {total}", support[a])));
            }
        }
        Ok(SplitKernel { support, alpha, rho })
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn alpha(&self) -> &Matrix {
        &self.alpha
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub q: ExtractedKernel,
    pub split: SplitKernel,
}

/// `q_ij = gamma_ij / nu_i` and its split. The diagonal mass `q_ii` is
/// apportioned to `(alpha_ii, rho_i)` in proportion to `(a_ii, r_i)`.
pub fn extract_q(gamma: &Coupling, nu: &DiscreteMeasure, k: &MhKernel) -> Result<Extraction> {
    let m = nu.len();
    if gamma.m != m || k.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: gamma.m });
    }
    let row_res = tv_slices(&gamma.row_marginal, nu.weights());
    if row_res > 1e-8 {
        return Err(Error::Precondition(format!("row marginal differs from nu by {row_res:e}")));
    }
    let support = nu.support();
    let s = support.len();
    let mut block = Matrix::zeros(s, s);
    for (a, &i) in support.iter().enumerate() {
        let total: f64 = (0..m).map(|j| gamma.entry(i, j)).sum();
        for (b, &j) in support.iter().enumerate() {
            block[(a, b)] = gamma.entry(i, j) / total;
        }
    }
    let q = ExtractedKernel { m, support: support.clone(), block };
    let split = split_kernel(&q, k)?;
    Ok(Extraction { q, split })
}

fn split_kernel(q: &ExtractedKernel, k: &MhKernel) -> Result<SplitKernel> {
    let s = q.support.len();
    let mut alpha = q.block.clone();
    let mut rho = vec![0.0; s];
    for (a, &i) in q.support.iter().enumerate() {
        let qii = q.block[(a, a)];
        let kii = k.kernel()[(i, i)];
        let r = k.rejection()[i];
        if r > 0.0 && kii > 0.0 {
            rho[a] = qii * (r / kii);
            alpha[(a, a)] = qii * (k.accept()[(i, i)] / kii);
        }
    }
    // Rows are exact up to rounding; renormalize through the checked constructor.
    SplitKernel::new(q.support.clone(), alpha, rho)
}

/// `sum_i nu_i [ sum_j alpha_ij log(alpha_ij / a_ij) + rho_i log(rho_i / r_i) ]`.
pub fn rate_from_split(split: &SplitKernel, nu: &DiscreteMeasure, k: &MhKernel) -> Result<ExtReal> {
    let m = nu.len();
    if k.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: k.len() });
    }
    let charged: f64 = split.support.iter().map(|&i| nu.mass(i)).sum();
    if (charged - 1.0).abs() > 1e-12 {
        return Err(Error::Precondition("split must cover the support of nu".into()));
    }
    let mut total = 0.0;
    for (a, &i) in split.support.iter().enumerate() {
        let w = nu.mass(i);
        if w == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for (b, &j) in split.support.iter().enumerate() {
            let al = split.alpha[(a, b)];
            if al == 0.0 {
                continue;
            }
            let reference = k.accept()[(i, j)];
            if reference <= 0.0 {
                return Ok(ExtReal::Infinite);
            }
            row += al * (al / reference).ln();
        }
        let rho = split.rho[a];
        if rho > 0.0 {
            let r = k.rejection()[i];
            if r <= 0.0 {
                return Ok(ExtReal::Infinite);
            }
            row += rho * (rho / r).ln();
        }
        total += w * row;
    }
    Ok(ExtReal::Finite(total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub value: ExtReal,
    pub coupling: Option<Coupling>,
    pub extraction: Option<Extraction>,
    pub iterations: usize,
    /// Largest marginal TV residual of the returned coupling.
    pub residual: f64,
    pub dual_value: Option<ExtReal>,
    pub gap: Option<f64>,
    pub wall_ms: f64,
    pub certificate: Option<InfiniteCertificate>,
}

/// The JSON summary of a rate computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub value: ExtReal,
    pub dual_value: Option<ExtReal>,
    pub gap: Option<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificate: Option<InfiniteCertificate>,
}

impl RateReport {
    pub fn summary(&self) -> RateSummary {
        RateSummary {
            value: self.value,
            dual_value: self.dual_value,
            gap: self.gap,
            iterations: self.iterations,
            residual: self.residual,
            wall_ms: self.wall_ms,
            certificate: self.certificate.clone(),
        }
    }

    fn infinite(certificate: InfiniteCertificate, start: Instant) -> Self {
        RateReport {
            value: ExtReal::Infinite,
            coupling: None,
            extraction: None,
            iterations: 0,
            residual: 0.0,
            dual_value: None,
            gap: None,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            certificate: Some(certificate),
        }
    }
}

fn check_kernel<K: StochasticKernel + ?Sized>(nu: &DiscreteMeasure, k: &K) -> Result<()> {
    if k.len() != nu.len() {
        return Err(Error::DimensionMismatch { expected: nu.len(), got: k.len() });
    }
    if **k.space() != **nu.space() {
        return Err(Error::SpaceMismatch);
    }
    Ok(())
}

/// Zero rows or columns of the restricted reference make the rate infinite.
fn restricted_certificate(kr: &Matrix, support: &[usize]) -> Option<InfiniteCertificate> {
    let s = support.len();
    if let Some(a) = (0..s).find(|&a| kr.row(a).iter().all(|v| *v == 0.0)) {
        return Some(if s == 1 {
            InfiniteCertificate::NoSelfLoop { state: support[a] }
        } else {
            InfiniteCertificate::NoExit { state: support[a] }
        });
    }
    (0..s).find(|&b| (0..s).all(|a| kr[(a, b)] == 0.0)).map(|b| InfiniteCertificate::NoEntry { state: support[b] })
}

/// Log-stabilized Sinkhorn on the restricted reference `nu_i K_ij`: scaling
/// vectors are absorbed into log-potentials whenever they leave
/// `[e^-30, e^30]`.
fn sinkhorn(nu: &[f64], kr: &Matrix, tol: f64, max_iter: usize) -> Result<(Matrix, usize, f64)> {
    const ABSORB: f64 = 30.0;
    let s = nu.len();
    let reference = Matrix::from_fn(s, s, |i, j| nu[i] * kr[(i, j)]);
    let mut log_f = vec![0.0; s];
    let mut log_g = vec![0.0; s];
    let mut g = reference.clone();
    let mut u = vec![1.0; s];
    let mut v = vec![1.0; s];
    let mut gv = g.right_mul(&v);
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        for i in 0..s {
            u[i] = nu[i] / gv[i];
        }
        let gtu = g.left_mul(&u);
        for j in 0..s {
            v[j] = nu[j] / gtu[j];
        }
        gv = g.right_mul(&v);
        let row_res: f64 = (0..s).map(|i| (u[i] * gv[i] - nu[i]).abs()).sum();
        let col_res: f64 = (0..s).map(|j| (v[j] * gtu[j] - nu[j]).abs()).sum();
        residual = row_res.max(col_res);
        if residual <= tol {
            let gamma = Matrix::from_fn(s, s, |i, j| u[i] * g[(i, j)] * v[j]);
            return Ok((gamma, it, residual));
        }
        if !residual.is_finite() {
            break;
        }
        let big = u.iter().chain(&v).any(|x| x.ln().abs() > ABSORB);
        if big {
            for i in 0..s {
                log_f[i] += u[i].ln();
                log_g[i] += v[i].ln();
            }
            g = Matrix::from_fn(s, s, |i, j| {
                let r = reference[(i, j)];
                if r == 0.0 {
                    0.0
                } else {
                    r * (log_f[i] + log_g[j]).exp()
                }
            });
            u.iter_mut().for_each(|x| *x = 1.0);
            v.iter_mut().for_each(|x| *x = 1.0);
            gv = g.right_mul(&v);
        }
    }
    Err(Error::NonConvergence { iterations: max_iter, residual })
}

/// Rate function by entropic projection onto the two marginal constraints.
pub fn rate_primal_sinkhorn<K: StochasticKernel + ?Sized>(nu: &DiscreteMeasure, k: &K, opts: &RateOptions) -> Result<RateReport> {
    let start = Instant::now();
    check_kernel(nu, k)?;
    let support = nu.support();
    let kr = k.matrix().select(&support, &support);
    if let Some(cert) = restricted_certificate(&kr, &support) {
        return Ok(RateReport::infinite(cert, start));
    }
    let nu_s: Vec<f64> = support.iter().map(|&i| nu.mass(i)).collect();
    let (block, iterations, residual) = sinkhorn(&nu_s, &kr, opts.tol, opts.max_iter)?;
    // Rescale the last rounding off the total mass.
    let total: f64 = block.as_slice().iter().sum();
    let mut block = block;
    block.scale_in_place(1.0 / total);
    let coupling = Coupling::new(nu.len(), support, block)?;
    let value = coupling.relative_entropy(nu, k)?;
    let (r1, r2) = coupling.marginal_residuals(nu);
    Ok(RateReport {
        value,
        coupling: Some(coupling),
        extraction: None,
        iterations,
        residual: r1.max(r2).max(residual),
        dual_value: None,
        gap: None,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        certificate: None,
    })
}

/// Primal solve plus the dual value, the extracted kernel and its split.
pub fn rate_report(nu: &DiscreteMeasure, k: &MhKernel, opts: &RateOptions) -> Result<RateReport> {
    let start = Instant::now();
    let mut report = rate_primal_sinkhorn(nu, k, opts)?;
    let dual = rate_dual_dv(nu, k)?;
    report.dual_value = Some(dual.value);
    if let (ExtReal::Finite(p), ExtReal::Finite(d)) = (report.value, dual.value) {
        report.gap = Some((p - d).abs());
    }
    if let Some(c) = &report.coupling {
        report.extraction = Some(extract_q(c, nu, k)?);
    }
    report.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualReport {
    pub value: ExtReal,
    /// Maximizer, zero outside `supp(nu)` and normalized to max 1.
    pub u: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// Concave objective `F(w) = sum_i nu_i (w_i - log sum_j K_ij e^{w_j})` in
/// log-coordinates on the support.
struct DualObjective<'a> {
    nu: &'a [f64],
    kr: &'a Matrix,
}

impl DualObjective<'_> {
    fn lse_rows(&self, w: &[f64]) -> Vec<f64> {
        let top = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ew: Vec<f64> = w.iter().map(|x| (x - top).exp()).collect();
        self.kr.right_mul(&ew).into_iter().map(|s| top + s.ln()).collect()
    }

    fn value(&self, w: &[f64]) -> f64 {
        self.lse_rows(w).iter().zip(self.nu).zip(w).map(|((l, n), x)| n * (x - l)).sum()
    }

    /// Gradient and the row laws `p_ij = K_ij e^{w_j} / sum_k K_ik e^{w_k}`.
    fn gradient(&self, w: &[f64]) -> (Vec<f64>, Matrix) {
        let s = w.len();
        let lse = self.lse_rows(w);
        let p = Matrix::from_fn(s, s, |i, j| {
            let k = self.kr[(i, j)];
            if k == 0.0 {
                0.0
            } else {
                k * (w[j] - lse[i]).exp()
            }
        });
        let inflow = p.left_mul(self.nu);
        let grad = (0..s).map(|k| self.nu[k] - inflow[k]).collect();
        (grad, p)
    }
}

/// Central finite-difference check of the dual gradient at `w` (log `u` on
/// the support of `nu`). Returns the largest absolute discrepancy.
pub fn dual_gradient_check(nu: &DiscreteMeasure, k: &MhKernel, w: &[f64]) -> f64 {
    let support = nu.support();
    let kr = k.kernel().select(&support, &support);
    let nu_s: Vec<f64> = support.iter().map(|&i| nu.mass(i)).collect();
    let obj = DualObjective { nu: &nu_s, kr: &kr };
    let (grad, _) = obj.gradient(w);
    let step = 1e-6;
    (0..w.len())
        .map(|i| {
            let mut plus = w.to_vec();
            let mut minus = w.to_vec();
            plus[i] += step;
            minus[i] -= step;
            let fd = (obj.value(&plus) - obj.value(&minus)) / (2.0 * step);
            (fd - grad[i]).abs()
        })
        .fold(0.0, f64::max)
}

/// Donsker-Varadhan dual `sup_{u > 0} sum_i nu_i log(u_i / (K u)_i)`, by
/// damped Newton ascent in `w = log u` with the gauge `w_0 = 0`.
pub fn rate_dual_dv<K: StochasticKernel + ?Sized>(nu: &DiscreteMeasure, k: &K) -> Result<DualReport> {
    check_kernel(nu, k)?;
    let m = nu.len();
    let support = nu.support();
    let s = support.len();
    let kr = k.matrix().select(&support, &support);
    if restricted_certificate(&kr, &support).is_some() {
        return Ok(DualReport { value: ExtReal::Infinite, u: vec![0.0; m], iterations: 0, gradient_norm: 0.0 });
    }
    let nu_s: Vec<f64> = support.iter().map(|&i| nu.mass(i)).collect();
    let obj = DualObjective { nu: &nu_s, kr: &kr };
    let mut w = vec![0.0; s];
    let mut fval = obj.value(&w);
    let mut iterations = 0;
    let mut gnorm = 0.0;
    const MAX_NEWTON: usize = 500;
    while iterations < MAX_NEWTON && s > 1 {
        iterations += 1;
        let (grad, p) = obj.gradient(&w);
        gnorm = grad[1..].iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if gnorm <= 1e-13 {
            break;
        }
        // -Hessian = sum_i nu_i (diag(p_i) - p_i p_i^T), reduced by the gauge.
        let n = s - 1;
        let mut neg_h = DMatrix::<f64>::zeros(n, n);
        for i in 0..s {
            let row = p.row(i);
            for a in 1..s {
                if row[a] == 0.0 {
                    continue;
                }
                neg_h[(a - 1, a - 1)] += nu_s[i] * row[a];
                for b in 1..s {
                    neg_h[(a - 1, b - 1)] -= nu_s[i] * row[a] * row[b];
                }
            }
        }
        let rhs = DVector::from_iterator(n, grad[1..].iter().cloned());
        let scale = (0..n).map(|a| neg_h[(a, a)]).fold(0.0f64, f64::max).max(1e-300);
        let mut ridge = 1e-14 * scale;
        let dir = loop {
            let mut h = neg_h.clone();
            for a in 0..n {
                h[(a, a)] += ridge;
            }
            if let Some(ch) = h.cholesky() {
                break ch.solve(&rhs);
            }
            ridge *= 100.0;
            if ridge > scale * 1e6 {
                break rhs.clone();
            }
        };
        let slope: f64 = dir.iter().zip(&grad[1..]).map(|(d, g)| d * g).sum();
        let mut t = 1.0;
        let accepted = loop {
            let trial: Vec<f64> =
                std::iter::once(0.0).chain(w[1..].iter().zip(dir.iter()).map(|(x, d)| x + t * d)).collect();
            let ft = obj.value(&trial);
            if ft.is_finite() && ft >= fval + 1e-4 * t * slope {
                break Some((trial, ft));
            }
            t *= 0.5;
            if t < 1e-12 {
                break None;
            }
        };
        match accepted {
            Some((trial, ft)) => {
                let gain = ft - fval;
                w = trial;
                fval = ft;
                if gain <= 1e-16 * (1.0 + fval.abs()) && gnorm <= 1e-9 {
                    break;
                }
            }
            None if gnorm <= 1e-9 => break,
            None => {
                return Err(Error::LineSearch { iteration: iterations, gradient_norm: gnorm, last_iterate: w });
            }
        }
    }
    if s == 1 {
        fval = -kr[(0, 0)].ln();
    }
    let top = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut u = vec![0.0; m];
    for (a, &i) in support.iter().enumerate() {
        u[i] = (w[a] - top).exp();
    }
    Ok(DualReport { value: ExtReal::Finite(fval.max(0.0)), u, iterations, gradient_norm: gnorm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRate {
    /// `-log K(x, x)`: the discrete rate of `delta_x`.
    pub discrete: ExtReal,
    /// `-log r(x)`: the rate of a point mass when the acceptance part has a
    /// density.
    pub singular: ExtReal,
    /// `log(1 + a(x, x) / r(x))`, the gap between the two.
    pub gap: Option<f64>,
    pub certificate: Option<InfiniteCertificate>,
}

/// Rate of a point mass. The only kernel leaving `delta_x` invariant is
/// `delta_x` itself, so the rate is `R(delta_x || K(x, .)) = -log K(x, x)`.
pub fn rate_delta(k: &MhKernel, x: usize) -> Result<DeltaRate> {
    if x >= k.len() {
        return Err(Error::Precondition(format!("state {x} out of range")));
    }
    let kxx = k.kernel()[(x, x)];
    let r = k.rejection()[x];
    let neg_log = |v: f64| if v > 0.0 { ExtReal::Finite(-v.ln()) } else { ExtReal::Infinite };
    Ok(DeltaRate {
        discrete: neg_log(kxx),
        singular: neg_log(r),
        gap: (r > 0.0).then(|| (kxx / r).ln()),
        certificate: (kxx <= 0.0).then_some(InfiniteCertificate::NoSelfLoop { state: x }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridRate {
    /// `(1 - p) I(nu_lambda) + p sum_k m_k (-log K_kk)`.
    pub value: ExtReal,
    pub density_part: ExtReal,
    pub singular_part: ExtReal,
    /// Rate of the flattened measure, solved directly.
    pub flattened: ExtReal,
    /// `|flattened - value|` when both are finite.
    pub gap: Option<f64>,
}

pub fn rate_hybrid(nu: &HybridMeasure, k: &MhKernel, opts: &RateOptions) -> Result<HybridRate> {
    let p = nu.p();
    let density_part = if p < 1.0 {
        rate_primal_sinkhorn(nu.density(), k, opts)?.value
    } else {
        ExtReal::Finite(0.0)
    };
    let mut singular_part = ExtReal::Finite(0.0);
    for &(cell, mass) in nu.atoms() {
        let d = rate_delta(k, cell)?;
        singular_part = singular_part + d.discrete.scale(mass);
    }
    let value = density_part.scale(1.0 - p) + singular_part.scale(p);
    let flattened = rate_primal_sinkhorn(&nu.flatten(), k, opts)?.value;
    let gap = match (flattened, value) {
        (ExtReal::Finite(a), ExtReal::Finite(b)) => Some((a - b).abs()),
        _ => None,
    };
    Ok(HybridRate { value, density_part, singular_part, flattened, gap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerronReport {
    /// `log` of the spectral radius of `K_ij e^{f_j}`.
    pub log_lambda: f64,
    /// Right eigenvector, max-normalized.
    pub right: Vec<f64>,
    /// Left eigenvector, max-normalized.
    pub left: Vec<f64>,
    pub iterations: usize,
}

/// Power iteration with Collatz-Wielandt bounds: stops when
/// `max (Mv)_i/v_i - min (Mv)_i/v_i <= tol * max`.
fn power_iteration(m: &Matrix, transpose: bool, tol: f64, max_iter: usize) -> Result<(f64, Vec<f64>, usize)> {
    let n = m.rows();
    let mut v = vec![1.0; n];
    let mut gap = f64::INFINITY;
    for it in 1..=max_iter {
        let w = if transpose { m.left_mul(&v) } else { m.right_mul(&v) };
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let ratio = w[i] / v[i];
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        let top = w.iter().cloned().fold(0.0, f64::max);
        if !(top > 0.0 && top.is_finite()) {
            break;
        }
        v = w.iter().map(|x| x / top).collect();
        gap = (hi - lo) / hi;
        if gap <= tol {
            return Ok((0.5 * (hi + lo), v, it));
        }
        if v.iter().any(|x| *x <= 0.0) {
            break;
        }
    }
    Err(Error::NonConvergence { iterations: max_iter, residual: gap })
}

/// Scaled cumulant generating function `lim (1/n) log E[e^{n L^n(f)}]`, the
/// log Perron root of the tilted kernel `K_ij e^{f_j}`.
pub fn scgf_perron<K: StochasticKernel + ?Sized>(k: &K, f: &[f64], opts: &RateOptions) -> Result<PerronReport> {
    let m = k.len();
    if f.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: f.len() });
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("observable must be finite".into()));
    }
    let shift = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kmat = k.matrix();
    let tilted = Matrix::from_fn(m, m, |i, j| kmat[(i, j)] * (f[j] - shift).exp());
    let (lambda, right, it1) = power_iteration(&tilted, false, opts.power_tol, opts.power_max_iter)?;
    let (_, left, it2) = power_iteration(&tilted, true, opts.power_tol, opts.power_max_iter)?;
    Ok(PerronReport { log_lambda: shift + lambda.ln(), right, left, iterations: it1 + it2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendreReport {
    /// `Lambda(f)`
    pub scgf: f64,
    /// Stationary law of the twisted kernel `K_ij e^{f_j} phi_j / (lambda phi_i)`.
    pub nu_star: Vec<f64>,
    pub nu_star_f: f64,
    pub rate: f64,
    /// `|Lambda(f) - (nu*(f) - I(nu*))|`
    pub gap: f64,
    /// `||nu* q* - nu*||_TV`
    pub twisted_residual: f64,
}

pub fn legendre_check<K: StochasticKernel + ?Sized>(k: &K, f: &[f64], opts: &RateOptions) -> Result<LegendreReport> {
    let perron = scgf_perron(k, f, opts)?;
    let m = k.len();
    let raw: Vec<f64> = (0..m).map(|i| perron.left[i] * perron.right[i]).collect();
    let nu_star = DiscreteMeasure::from_unnormalized(k.space().clone(), raw)?;
    let kmat = k.matrix();
    let lambda = perron.log_lambda;
    let twisted = Matrix::from_fn(m, m, |i, j| {
        kmat[(i, j)] * (f[j] - lambda).exp() * perron.right[j] / perron.right[i]
    });
    let twisted_residual = tv_slices(&twisted.left_mul(nu_star.weights()), nu_star.weights());
    let rate = rate_primal_sinkhorn(&nu_star, k, opts)?
        .value
        .finite()
        .ok_or_else(|| Error::Precondition("twisted stationary law has infinite rate".into()))?;
    let nu_star_f = nu_star.integrate(f);
    Ok(LegendreReport {
        scgf: perron.log_lambda,
        gap: (perron.log_lambda - (nu_star_f - rate)).abs(),
        nu_star: nu_star.weights().to_vec(),
        nu_star_f,
        rate,
        twisted_residual,
    })
}

/// `min_nu { nu(f) + I(nu) } = -Lambda(-f)`.
pub fn laplace_limit<K: StochasticKernel + ?Sized>(k: &K, f: &[f64], opts: &RateOptions) -> Result<f64> {
    let neg: Vec<f64> = f.iter().map(|v| -v).collect();
    Ok(-scgf_perron(k, &neg, opts)?.log_lambda)
}

/// Checks both marginals of a coupling against `nu`.
pub fn check_marginals(c: &Coupling, nu: &DiscreteMeasure) -> Result<(f64, f64)> {
    let probe = DiscreteMeasure::from_unnormalized(nu.space().clone(), c.row_marginal.clone())?;
    same_space(&probe, nu)?;
    Ok(c.marginal_residuals(nu))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::kernel::{build_kernel, MatrixKernel, ProposalSpec, TargetSpec};
    use crate::measures::{joint_relative_entropy, relative_entropy, StateSpace};

    fn two_state() -> MhKernel {
        let space = Arc::new(StateSpace::finite(2).unwrap());
        build_kernel(&TargetSpec::Probabilities { probs: vec![2.0 / 3.0, 1.0 / 3.0] }, &ProposalSpec::Uniform, space)
            .unwrap()
    }

    fn iid(rho: &[f64]) -> MhKernel {
        let space = Arc::new(StateSpace::finite(rho.len()).unwrap());
        let t = TargetSpec::Probabilities { probs: rho.to_vec() };
        build_kernel(&t, &ProposalSpec::Independence { density: t.clone() }, space).unwrap()
    }

    fn three_state() -> MhKernel {
        let space = Arc::new(StateSpace::finite(3).unwrap());
        build_kernel(
            &TargetSpec::Probabilities { probs: vec![0.5, 0.3, 0.2] },
            &ProposalSpec::Matrix {
                rows: vec![vec![0.2, 0.5, 0.3], vec![0.4, 0.2, 0.4], vec![0.3, 0.3, 0.4]],
            },
            space,
        )
        .unwrap()
    }

    fn measure(k: &MhKernel, w: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::new(k.space().clone(), w.to_vec()).unwrap()
    }

    /// One-variable oracle for the 2-state example: maximize
    /// `0.5 log(1/(0.75 + 0.25 t)) + 0.5 log(t/(0.5 + 0.5 t))` by golden
    /// section over `t`.
    fn two_state_dual_oracle() -> (f64, f64) {
        let g = |t: f64| 0.5 * (1.0 / (0.75 + 0.25 * t)).ln() + 0.5 * (t / (0.5 + 0.5 * t)).ln();
        let (mut a, mut b) = (0.1f64, 10.0f64);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            if g(c) > g(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let t = 0.5 * (a + b);
        (t, g(t))
    }

    #[test]
    fn dual_oracle_frozen_value() {
        let (t, v) = two_state_dual_oracle();
        assert!((t - 3f64.sqrt()).abs() < 1e-7);
        assert!((v - 0.0346682).abs() < 1e-6);
    }

    #[test]
    fn equilibrium_rate_is_zero() {
        let k = two_state();
        let pi = measure(&k, k.target());
        let rep = rate_primal_sinkhorn(&pi, &k, &RateOptions::default()).unwrap();
        assert!(rep.value.to_f64() < 1e-12);
        let c = rep.coupling.unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((c.entry(i, j) - pi.mass(i) * k.kernel()[(i, j)]).abs() < 1e-12);
            }
        }
        let dual = rate_dual_dv(&pi, &k).unwrap();
        assert!(dual.value.to_f64() < 1e-12);
        assert!((dual.u[0] - dual.u[1]).abs() < 1e-9);
    }

    #[test]
    fn iid_rows_give_relative_entropy() {
        let k = iid(&[0.5, 0.5]);
        let nu = measure(&k, &[0.9, 0.1]);
        let closed = relative_entropy(&nu, &DiscreteMeasure::uniform(k.space().clone())).unwrap().to_f64();
        assert!((closed - 0.368064).abs() < 1e-6);
        let rep = rate_primal_sinkhorn(&nu, &k, &RateOptions::default()).unwrap();
        assert!((rep.value.to_f64() - closed).abs() < 1e-10);
        let dual = rate_dual_dv(&nu, &k).unwrap();
        assert!((dual.value.to_f64() - closed).abs() < 1e-10);
    }

    #[test]
    fn two_state_worked_instance() {
        let k = two_state();
        let nu = measure(&k, &[0.5, 0.5]);
        let (t, oracle) = two_state_dual_oracle();
        let rep = rate_report(&nu, &k, &RateOptions::default()).unwrap();
        assert!((rep.value.to_f64() - oracle).abs() < 1e-9);
        assert!(rep.residual <= 1e-10);
        let dual = rate_dual_dv(&nu, &k).unwrap();
        assert!((dual.value.to_f64() - oracle).abs() < 1e-10);
        assert!((dual.u[1] / dual.u[0] - t).abs() < 1e-6);
        let ex = rep.extraction.unwrap();
        assert!(ex.q.invariance_residual(&nu) < 1e-10);
    }

    #[test]
    fn point_mass_rates() {
        let k = two_state();
        let d0 = rate_delta(&k, 0).unwrap();
        assert!((d0.discrete.to_f64() + 0.75f64.ln()).abs() < 1e-15);
        assert!((d0.discrete.to_f64() - 0.287682).abs() < 1e-6);
        assert!((d0.singular.to_f64() - 4f64.ln()).abs() < 1e-15);
        let d1 = rate_delta(&k, 1).unwrap();
        assert!((d1.discrete.to_f64() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(d1.singular, ExtReal::Infinite);
        for x in 0..2 {
            let nu = DiscreteMeasure::dirac(k.space().clone(), x).unwrap();
            let rep = rate_primal_sinkhorn(&nu, &k, &RateOptions::default()).unwrap();
            assert!((rep.value.to_f64() + k.kernel()[(x, x)].ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_self_loop_is_infinite_with_certificate() {
        let space = Arc::new(StateSpace::finite(2).unwrap());
        let flip = MatrixKernel::new(space.clone(), Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap())
            .unwrap();
        let nu = DiscreteMeasure::dirac(space.clone(), 0).unwrap();
        let rep = rate_primal_sinkhorn(&nu, &flip, &RateOptions::default()).unwrap();
        assert_eq!(rep.value, ExtReal::Infinite);
        assert_eq!(rep.certificate, Some(InfiniteCertificate::NoSelfLoop { state: 0 }));
        // Uniform nu is fine for the flip chain: it is invariant.
        let u = DiscreteMeasure::uniform(space);
        assert!(rate_primal_sinkhorn(&u, &flip, &RateOptions::default()).unwrap().value.to_f64() < 1e-12);
    }

    #[test]
    fn extraction_identity_and_frozen() {
        let k = three_state();
        let pi = measure(&k, k.target());
        let gamma = Coupling::product(&pi, k.kernel()).unwrap();
        let ex = extract_q(&gamma, &pi, &k).unwrap();
        for i in 0..3 {
            let row = ex.q.row(i).unwrap();
            for j in 0..3 {
                assert!((row[j] - k.kernel()[(i, j)]).abs() < 1e-14);
            }
            assert!((ex.split.rho()[i] - k.rejection()[i]).abs() < 1e-14);
        }
        assert!(rate_from_split(&ex.split, &pi, &k).unwrap().to_f64().abs() < 1e-14);

        let nu = measure(&k, &[0.2, 0.3, 0.5]);
        let frozen = Coupling::from_dense(&Matrix::from_fn(3, 3, |i, j| if i == j { nu.mass(i) } else { 0.0 })).unwrap();
        let ex = extract_q(&frozen, &nu, &k).unwrap();
        assert_eq!(ex.q.block(), &Matrix::identity(3));
        for i in 0..3 {
            let r = k.rejection()[i];
            let want = if r > 0.0 { r / k.kernel()[(i, i)] } else { 0.0 };
            assert!((ex.split.rho()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_outside_support_are_undefined() {
        let k = three_state();
        let nu = measure(&k, &[0.6, 0.4, 0.0]);
        let rep = rate_report(&nu, &k, &RateOptions::default()).unwrap();
        let ex = rep.extraction.unwrap();
        assert!(ex.q.row(2).is_none());
        assert!(ex.q.row(0).is_some());
    }

    #[test]
    fn frozen_split_values() {
        let k = two_state();
        let nu = DiscreteMeasure::dirac(k.space().clone(), 0).unwrap();
        let raw = SplitKernel::new(vec![0], Matrix::zeros(1, 1), vec![1.0]).unwrap();
        assert!((rate_from_split(&raw, &nu, &k).unwrap().to_f64() - 4f64.ln()).abs() < 1e-15);
        let gamma = Coupling::from_dense(&Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap()).unwrap();
        let ex = extract_q(&gamma, &nu, &k).unwrap();
        let v = rate_from_split(&ex.split, &nu, &k).unwrap().to_f64();
        assert!((v + 0.75f64.ln()).abs() < 1e-15);
        // Retention where r = 0 is a support violation.
        let nu1 = DiscreteMeasure::dirac(k.space().clone(), 1).unwrap();
        let bad = SplitKernel::new(vec![1], Matrix::zeros(1, 1), vec![1.0]).unwrap();
        assert_eq!(rate_from_split(&bad, &nu1, &k).unwrap(), ExtReal::Infinite);
    }

    #[test]
    fn random_split_matches_joint_entropy() {
        let k = three_state();
        let nu = measure(&k, &[0.25, 0.35, 0.4]);
        // A nu-invariant kernel from a symmetric coupling with marginals nu.
        let mut gamma = Matrix::from_fn(3, 3, |i, j| [[3.0, 1.0, 2.0], [1.0, 4.0, 1.5], [2.0, 1.5, 2.5]][i][j]);
        for _ in 0..2000 {
            let rows = gamma.row_sums();
            for i in 0..3 {
                let f = nu.mass(i) / rows[i];
                gamma.row_mut(i).iter_mut().for_each(|v| *v *= f);
            }
            gamma = gamma.transpose();
        }
        let c = Coupling::from_dense(&gamma).unwrap();
        let ex = extract_q(&c, &nu, &k).unwrap();
        let via_split = rate_from_split(&ex.split, &nu, &k).unwrap().to_f64();
        let q = ex.q.to_dense();
        let nq = Matrix::from_fn(3, 3, |i, j| nu.mass(i) * q[(i, j)]);
        let via_joint = joint_relative_entropy(&nq, &nu, k.kernel()).unwrap().to_f64();
        assert!((via_split - via_joint).abs() < 1e-12, "{via_split} vs {via_joint}");
        // Chain rule: joint entropy of nu ⊗ q is the nu-average of row entropies.
        let rows: f64 = (0..3)
            .map(|i| nu.mass(i) * crate::measures::relative_entropy_slices(q.row(i), k.kernel().row(i)).to_f64())
            .sum();
        assert!((via_joint - rows).abs() < 1e-12);
        // The optimum is no larger than this feasible kernel.
        let opt = rate_primal_sinkhorn(&nu, &k, &RateOptions::default()).unwrap().value.to_f64();
        assert!(opt <= via_joint + 1e-12);
    }

    #[test]
    fn dual_gradient_matches_finite_differences() {
        let k = three_state();
        let nu = measure(&k, &[0.25, 0.35, 0.4]);
        assert!(dual_gradient_check(&nu, &k, &[0.0, 0.3, -0.7]) < 1e-8);
        assert!(dual_gradient_check(&nu, &k, &[0.0, -2.0, 1.5]) < 1e-8);
    }

    #[test]
    fn hybrid_examples() {
        let k = two_state();
        let pi = measure(&k, k.target());
        let opts = RateOptions::default();
        let h0 = HybridMeasure::new(pi.clone(), vec![], 0.0).unwrap();
        let r0 = rate_hybrid(&h0, &k, &opts).unwrap();
        assert!(r0.value.to_f64() < 1e-12);
        let h1 = HybridMeasure::new(pi.clone(), vec![(0, 1.0)], 1.0).unwrap();
        assert!((rate_hybrid(&h1, &k, &opts).unwrap().value.to_f64() + 0.75f64.ln()).abs() < 1e-15);
        let half = HybridMeasure::new(pi, vec![(0, 1.0)], 0.5).unwrap();
        let r = rate_hybrid(&half, &k, &opts).unwrap();
        assert!((r.value.to_f64() - 0.143841).abs() < 1e-6);
        // Convexity: the flattened measure costs no more than the split.
        assert!(r.flattened.to_f64() <= r.value.to_f64() + 1e-12);
    }

    #[test]
    fn scgf_examples() {
        let k = two_state();
        let opts = RateOptions::default();
        assert!(scgf_perron(&k, &[0.0, 0.0], &opts).unwrap().log_lambda.abs() < 1e-12);
        let want = ((1.75 + 1.0625f64.sqrt()) / 2.0).ln();
        let got = scgf_perron(&k, &[0.0, 2f64.ln()], &opts).unwrap().log_lambda;
        assert!((got - want).abs() < 1e-12);
        assert!((want - 0.329583).abs() < 1e-6);
        assert!((scgf_perron(&k, &[1.3, 1.3], &opts).unwrap().log_lambda - 1.3).abs() < 1e-12);
    }

    #[test]
    fn legendre_examples() {
        let k = two_state();
        let opts = RateOptions::default();
        let zero = legendre_check(&k, &[0.0, 0.0], &opts).unwrap();
        assert!(zero.gap < 1e-9 && zero.rate < 1e-9);
        assert!((zero.nu_star[0] - 2.0 / 3.0).abs() < 1e-9);
        let rep = legendre_check(&k, &[0.0, 2f64.ln()], &opts).unwrap();
        assert!(rep.gap <= 1e-6);
        assert!(rep.twisted_residual < 1e-10);
    }
}
