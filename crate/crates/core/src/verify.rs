//! Built-in instances and the verification suites run by `mh-ldp verify`
//! and by the acceptance test target.
//!
//! Each numbered criterion produces a list of [`Check`]s; a criterion passes
//! when none of its checks fails and it finishes within its time budget.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ext::ExtReal;
use crate::kernel::{build_kernel, condition_de_witness, KernelSpec, MhKernel, ProposalSpec, StochasticKernel, TargetSpec};
use crate::measures::{lp_distance, relative_entropy, tv_norm, DiscreteMeasure, HybridMeasure, StateSpace};
use crate::rate::{legendre_check, rate_dual_dv, rate_hybrid, rate_primal_sinkhorn, scgf_perron, RateOptions};
use crate::sampler::{enumerate_empirical_law, laplace_log, mc_ball_probability, stream_rng, Metric};
use crate::smoothing::{mix_with_target, smoothing_sweep, AtomSample, SweepSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// The fixture violates a premise, so the check is meaningless.
    Invalid,
    /// Reported as data, never fails.
    Info,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: String,
    pub value: f64,
    pub bound: f64,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl Check {
    /// Passes when `value <= bound`.
    fn at_most(id: impl Into<String>, value: f64, bound: f64) -> Self {
        let verdict = if value <= bound { Verdict::Pass } else { Verdict::Fail };
        Check { id: id.into(), value, bound, verdict, detail: String::new() }
    }

    fn holds(id: impl Into<String>, ok: bool, value: f64, bound: f64) -> Self {
        Check { id: id.into(), value, bound, verdict: if ok { Verdict::Pass } else { Verdict::Fail }, detail: String::new() }
    }

    fn info(id: impl Into<String>, value: f64) -> Self {
        Check { id: id.into(), value, bound: f64::NAN, verdict: Verdict::Info, detail: String::new() }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub number: u8,
    pub title: String,
    pub checks: Vec<Check>,
    pub wall_ms: f64,
    pub time_limit_ms: Option<f64>,
}

impl CriterionReport {
    pub fn invalid(&self) -> bool {
        self.checks.iter().any(|c| c.verdict == Verdict::Invalid)
    }

    pub fn within_time(&self) -> bool {
        self.time_limit_ms.map_or(true, |t| self.wall_ms <= t)
    }

    pub fn passed(&self) -> bool {
        self.within_time() && self.checks.iter().all(|c| matches!(c.verdict, Verdict::Pass | Verdict::Info))
    }

    /// One line: verdict, number, title, failing checks.
    pub fn summary_line(&self) -> String {
        let status = if self.passed() {
            "PASS"
        } else if self.invalid() {
            "INVALID"
        } else {
            "FAIL"
        };
        let mut line = format!("[{status}] criterion {:>2}: {} ({:.0} ms", self.number, self.title, self.wall_ms);
        if let Some(t) = self.time_limit_ms {
            line.push_str(&format!(" / limit {t:.0} ms"));
        }
        line.push(')');
        let bad: Vec<String> = self
            .checks
            .iter()
            .filter(|c| matches!(c.verdict, Verdict::Fail | Verdict::Invalid))
            .map(|c| format!("{}={:e} (bound {:e})", c.id, c.value, c.bound))
            .collect();
        if !bad.is_empty() {
            line.push_str(&format!(" failing: {}", bad.join(", ")));
        }
        line
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub criteria: Vec<CriterionReport>,
    pub wall_ms: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(CriterionReport::passed)
    }

    /// 0 when everything passes, 2 when a fixture is invalid, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else if self.criteria.iter().any(CriterionReport::invalid) {
            2
        } else {
            1
        }
    }

    pub fn checks(&self) -> impl Iterator<Item = (u8, &Check)> {
        self.criteria.iter().flat_map(|c| c.checks.iter().map(move |k| (c.number, k)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    pub rate: RateOptions,
    /// Replaces the gaussian grid kernel used for the singular-measure checks.
    pub lemma_kernel: Option<KernelSpec>,
    /// Point whose cell carries the point mass in the grid limit check.
    pub lemma_point: f64,
    /// `(position, mass)` atoms of the hybrid measure.
    pub lemma_atoms: Vec<(f64, f64)>,
    pub lemma_levels: Vec<usize>,
    pub grid_cells: usize,
    pub smoothing_cells: Vec<usize>,
    pub smoothing_ns: Vec<usize>,
    pub mc_reps: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 7,
            rate: RateOptions::default(),
            lemma_kernel: None,
            lemma_point: 0.4,
            lemma_atoms: vec![(0.3, 0.5), (0.6, 0.5)],
            lemma_levels: vec![64, 128, 256, 512],
            grid_cells: 256,
            smoothing_cells: vec![1024, 2048],
            smoothing_ns: (2..=8).map(|e| 1usize << e).collect(),
            mc_reps: 10_000,
        }
    }
}

pub const SUITES: [&str; 5] = ["lemmas", "duality", "smoothing", "sampler", "all"];

fn suite_criteria(suite: &str) -> Result<Vec<u8>> {
    Ok(match suite {
        "lemmas" => vec![1, 2, 4, 5, 6, 10, 11],
        "duality" => vec![3, 7, 12],
        "smoothing" => vec![9],
        "sampler" => vec![8],
        "all" => (1..=12).collect(),
        other => return Err(Error::InvalidSpec(format!("unknown suite {other:?}; expected one of {SUITES:?}"))),
    })
}

pub fn run_suite(suite: &str, cfg: &VerifyConfig) -> Result<SuiteReport> {
    let start = Instant::now();
    let criteria = suite_criteria(suite)?
        .into_iter()
        .map(|n| criterion(n, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport { suite: suite.to_string(), criteria, wall_ms: ms(start) })
}

pub fn criterion(number: u8, cfg: &VerifyConfig) -> Result<CriterionReport> {
    let start = Instant::now();
    let (title, checks, limit) = match number {
        1 => ("kernel correctness", c1_kernels(cfg)?, Some(5_000.0)),
        2 => ("equilibrium zero", c2_equilibrium(cfg)?, None),
        3 => ("primal-dual agreement", c3_duality(cfg)?, None),
        4 => ("closed-form oracles", c4_oracles(cfg)?, None),
        5 => ("grid point-mass limit", c5_point_mass(cfg)?, None),
        6 => ("decomposition identity", c6_decomposition(cfg)?, None),
        7 => ("Legendre/Varadhan duality", c7_legendre(cfg)?, None),
        8 => ("exact-law cross-check", c8_exact_law(cfg)?, Some(30_000.0)),
        9 => ("smoothing construction", c9_smoothing(cfg)?, Some(60_000.0)),
        10 => ("mixing with the target", c10_mixing(cfg)?, None),
        11 => ("rejection-atom witness", c11_witness(cfg)?, None),
        12 => ("convexity", c12_convexity(cfg)?, None),
        other => return Err(Error::InvalidSpec(format!("no criterion {other}"))),
    };
    Ok(CriterionReport { number, title: title.to_string(), checks, wall_ms: ms(start), time_limit_ms: limit })
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

// ---------------------------------------------------------------- instances

/// `pi = (2/3, 1/3)` with the uniform proposal:
/// `K = [[0.75, 0.25], [0.5, 0.5]]`.
pub fn two_state_kernel() -> MhKernel {
    let space = Arc::new(StateSpace::finite(2).expect("two states"));
    build_kernel(&TargetSpec::Probabilities { probs: vec![2.0 / 3.0, 1.0 / 3.0] }, &ProposalSpec::Uniform, space)
        .expect("valid instance")
}

fn positive_simplex(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Random target and random positive proposal matrix on `m` states.
pub fn random_finite_kernel(rng: &mut ChaCha8Rng, m: usize) -> Result<MhKernel> {
    let space = Arc::new(StateSpace::finite(m)?);
    let probs = positive_simplex(rng, m);
    let rows = (0..m).map(|_| positive_simplex(rng, m)).collect();
    build_kernel(&TargetSpec::Probabilities { probs }, &ProposalSpec::Matrix { rows }, space)
}

/// Random measure; each state is dropped with probability `sparsity`
/// (at least one state is kept).
pub fn random_measure(rng: &mut ChaCha8Rng, space: Arc<StateSpace>, sparsity: f64) -> Result<DiscreteMeasure> {
    let m = space.len();
    let keep = rng.gen_range(0..m);
    let w = (0..m)
        .map(|i| if i != keep && rng.gen_bool(sparsity) { 0.0 } else { rng.gen_range(0.05..1.0) })
        .collect();
    DiscreteMeasure::from_unnormalized(space, w)
}

/// Five grid instances on `cells` cells.
pub fn grid_specs(cells: usize) -> Result<Vec<KernelSpec>> {
    let unit = Arc::new(StateSpace::grid(0.0, 1.0, cells)?);
    let wide = Arc::new(StateSpace::grid(-2.0, 2.0, cells)?);
    let gm = |means: Vec<f64>, sds: Vec<f64>, weights: Vec<f64>| TargetSpec::GaussianMixture { means, sds, weights };
    let table: Vec<f64> = (0..cells)
        .map(|i| 1.0 + 0.6 * (6.0 * std::f64::consts::PI * (i as f64 + 0.5) / cells as f64).sin())
        .collect();
    Ok(vec![
        KernelSpec {
            space: unit.clone(),
            target: gm(vec![0.3, 0.7], vec![0.08, 0.12], vec![0.6, 0.4]),
            proposal: ProposalSpec::RandomWalk { scale: 0.1 },
        },
        KernelSpec {
            space: unit.clone(),
            target: gm(vec![0.5], vec![0.2], vec![1.0]),
            proposal: ProposalSpec::RandomWalk { scale: 0.05 },
        },
        KernelSpec {
            space: wide,
            target: gm(vec![-1.0, 1.0], vec![0.5, 0.3], vec![1.0, 1.0]),
            proposal: ProposalSpec::Uniform,
        },
        KernelSpec {
            space: unit.clone(),
            target: TargetSpec::Table { values: table },
            proposal: ProposalSpec::RandomWalk { scale: 0.3 },
        },
        KernelSpec {
            space: unit,
            target: gm(vec![0.2], vec![0.1], vec![1.0]),
            proposal: ProposalSpec::Independence { density: gm(vec![0.4], vec![1.0], vec![1.0]) },
        },
    ])
}

/// Two-bump gaussian target with a random-walk proposal on `[0, 1]`.
pub fn gaussian_spec(cells: usize) -> Result<KernelSpec> {
    Ok(KernelSpec {
        space: Arc::new(StateSpace::grid(0.0, 1.0, cells)?),
        target: TargetSpec::GaussianMixture { means: vec![0.35, 0.65], sds: vec![0.1, 0.1], weights: vec![1.0, 1.0] },
        proposal: ProposalSpec::RandomWalk { scale: 0.15 },
    })
}

/// Three well-separated modes; the smoothing atoms sit at the modes.
pub fn smoothing_spec(cells: usize) -> Result<KernelSpec> {
    Ok(KernelSpec {
        space: Arc::new(StateSpace::grid(0.0, 1.0, cells)?),
        target: TargetSpec::GaussianMixture {
            means: vec![0.2, 0.5, 0.8],
            sds: vec![0.06; 3],
            weights: vec![1.0; 3],
        },
        proposal: ProposalSpec::RandomWalk { scale: 0.15 },
    })
}

pub const SMOOTHING_ATOMS: [(f64, f64); 3] = [(0.2, 0.3), (0.5, 0.4), (0.8, 0.3)];

/// The same spec on a different grid size.
fn regrid(spec: &KernelSpec, cells: usize) -> Result<KernelSpec> {
    let g = spec
        .space
        .as_grid()
        .ok_or_else(|| Error::InvalidSpec("the lemma kernel must live on a grid".into()))?;
    let target = match &spec.target {
        TargetSpec::Table { .. } => {
            return Err(Error::InvalidSpec("table targets cannot be refined; use a family".into()))
        }
        t => t.clone(),
    };
    if matches!(spec.proposal, ProposalSpec::Table { .. } | ProposalSpec::Matrix { .. }) {
        return Err(Error::InvalidSpec("table proposals cannot be refined; use a family".into()));
    }
    Ok(KernelSpec { space: Arc::new(StateSpace::grid(g.lo(), g.hi(), cells)?), target, proposal: spec.proposal.clone() })
}

fn lemma_spec(cfg: &VerifyConfig, cells: usize) -> Result<KernelSpec> {
    match &cfg.lemma_kernel {
        Some(spec) => regrid(spec, cells),
        None => gaussian_spec(cells),
    }
}

/// The finite instances of the kernel-correctness criterion.
fn finite_instances(cfg: &VerifyConfig) -> Result<Vec<MhKernel>> {
    let mut rng = stream_rng(cfg.seed, 1);
    (0..50)
        .map(|_| {
            let m = rng.gen_range(2..=12);
            random_finite_kernel(&mut rng, m)
        })
        .collect()
}

fn grid_instances(cfg: &VerifyConfig) -> Result<Vec<MhKernel>> {
    grid_specs(cfg.grid_cells)?.iter().map(KernelSpec::build).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn finite_or(v: ExtReal, fallback: f64) -> f64 {
    v.finite().unwrap_or(fallback)
}

// ---------------------------------------------------------------- criteria

fn c1_kernels(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let finite = finite_instances(cfg)?;
    let grids = grid_instances(cfg)?;
    let (mut row, mut rev, mut inv) = (0.0f64, 0.0f64, 0.0f64);
    for k in &finite {
        let d = k.diagnostics();
        row = row.max(d.row_residual);
        rev = rev.max(d.reversibility_residual);
        inv = inv.max(max_abs_diff(&k.kernel().left_mul(k.target()), k.target()));
    }
    let (mut grow, mut grev) = (0.0f64, 0.0f64);
    for k in &grids {
        let d = k.diagnostics();
        grow = grow.max(d.row_residual);
        grev = grev.max(d.reversibility_residual);
    }
    Ok(vec![
        Check::at_most("finite.row_sums", row, 1e-10).with_detail(format!("{} instances", finite.len())),
        Check::at_most("finite.reversibility", rev, 1e-10),
        Check::at_most("finite.invariance", inv, 1e-12),
        Check::at_most("grid.row_sums", grow, 1e-10).with_detail(format!("{} instances", grids.len())),
        Check::at_most("grid.reversibility", grev, 1e-8),
    ])
}

fn c2_equilibrium(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut worst = 0.0f64;
    let mut count = 0;
    for k in finite_instances(cfg)?.iter().chain(grid_instances(cfg)?.iter()) {
        let pi = DiscreteMeasure::new(k.space().clone(), k.target().to_vec())?;
        let v = rate_primal_sinkhorn(&pi, k, &cfg.rate)?.value;
        worst = worst.max(finite_or(v, f64::INFINITY));
        count += 1;
    }
    Ok(vec![Check::at_most("rate_at_target", worst, 1e-9).with_detail(format!("{count} instances"))])
}

fn c3_duality(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut rng = stream_rng(cfg.seed, 3);
    let (mut gap, mut slowest) = (0.0f64, 0.0f64);
    let mut below = true;
    for _ in 0..20 {
        let m = rng.gen_range(2..=8);
        let k = random_finite_kernel(&mut rng, m)?;
        let nu = random_measure(&mut rng, k.space().clone(), 0.3)?;
        let t = Instant::now();
        let primal = rate_primal_sinkhorn(&nu, &k, &cfg.rate)?.value;
        slowest = slowest.max(ms(t));
        let t = Instant::now();
        let dual = rate_dual_dv(&nu, &k)?.value;
        slowest = slowest.max(ms(t));
        match (primal, dual) {
            (ExtReal::Finite(p), ExtReal::Finite(d)) => {
                gap = gap.max((p - d).abs());
                below &= d <= p + 1e-6;
            }
            (ExtReal::Infinite, ExtReal::Infinite) => {}
            _ => gap = f64::INFINITY,
        }
    }
    Ok(vec![
        Check::at_most("primal_dual_gap", gap, 1e-6).with_detail("20 random instances"),
        Check::holds("dual_below_primal", below, 0.0, 0.0),
        Check::at_most("slowest_solve_ms", slowest, 1_000.0),
    ])
}

fn c4_oracles(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut rng = stream_rng(cfg.seed, 4);
    let mut iid = 0.0f64;
    for _ in 0..10 {
        let m = rng.gen_range(2..=6);
        let space = Arc::new(StateSpace::finite(m)?);
        let rho = TargetSpec::Probabilities { probs: positive_simplex(&mut rng, m) };
        // Proposing from the target itself accepts every move: K(x, .) = rho.
        let k = build_kernel(&rho, &ProposalSpec::Independence { density: rho.clone() }, space.clone())?;
        let nu = random_measure(&mut rng, space.clone(), 0.2)?;
        let rho_m = DiscreteMeasure::new(space, k.target().to_vec())?;
        let want = relative_entropy(&nu, &rho_m)?.to_f64();
        let got = rate_primal_sinkhorn(&nu, &k, &cfg.rate)?.value.to_f64();
        iid = iid.max((got - want).abs());
    }
    let k = two_state_kernel();
    let half = DiscreteMeasure::new(k.space().clone(), vec![0.5, 0.5])?;
    let two_state = rate_primal_sinkhorn(&half, &k, &cfg.rate)?.value.to_f64();
    // Dual calculus: the maximizer is u = (1, sqrt 3).
    let t = 3f64.sqrt();
    let oracle = 0.5 * (1.0 / (0.75 + 0.25 * t)).ln() + 0.5 * (t / (0.5 + 0.5 * t)).ln();
    let mut delta_err = 0.0f64;
    for (x, want) in [(0, -(0.75f64.ln())), (1, -(0.5f64.ln()))] {
        let d = DiscreteMeasure::dirac(k.space().clone(), x)?;
        delta_err = delta_err.max((rate_primal_sinkhorn(&d, &k, &cfg.rate)?.value.to_f64() - want).abs());
    }
    Ok(vec![
        Check::at_most("iid_rows", iid, 1e-8).with_detail("10 cases"),
        Check::at_most("two_state_half", (two_state - oracle).abs(), 1e-5)
            .with_detail(format!("I = {two_state:.7}, oracle {oracle:.7}")),
        Check::at_most("point_masses", delta_err, 1e-9),
    ])
}

/// Cell of `x` on a grid spec.
fn cell_at(spec: &KernelSpec, x: f64) -> Result<usize> {
    let g = spec.space.as_grid().ok_or_else(|| Error::InvalidSpec("grid expected".into()))?;
    if !(x > g.lo() && x < g.hi()) {
        return Err(Error::InvalidSpec(format!("{x} lies outside the grid")));
    }
    Ok(g.cell_of(x))
}

fn c5_point_mass(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut gaps = Vec::new();
    let mut checks = Vec::new();
    for &cells in &cfg.lemma_levels {
        let spec = lemma_spec(cfg, cells)?;
        let k = spec.build()?;
        let c = cell_at(&spec, cfg.lemma_point)?;
        let r = k.rejection()[c];
        if !(r > 0.0) {
            checks.push(
                Check { id: format!("premise.m{cells}"), value: r, bound: 0.0, verdict: Verdict::Invalid, detail: String::new() }
                    .with_detail("r vanishes at the point: its point mass has infinite rate"),
            );
            continue;
        }
        let nu = DiscreteMeasure::dirac(k.space().clone(), c)?;
        let i_h = rate_primal_sinkhorn(&nu, &k, &cfg.rate)?.value.to_f64();
        let gap = (i_h + r.ln()).abs();
        checks.push(Check::info(format!("gap.m{cells}"), gap));
        gaps.push(gap);
    }
    if checks.iter().any(|c| c.verdict == Verdict::Invalid) {
        return Ok(checks);
    }
    for (w, cells) in gaps.windows(2).zip(cfg.lemma_levels.windows(2)) {
        let ratio = w[0] / w[1];
        checks.push(Check::holds(
            format!("halving.m{}_to_m{}", cells[0], cells[1]),
            (1.6..=2.4).contains(&ratio),
            ratio,
            2.0,
        ));
    }
    Ok(checks)
}

fn c6_decomposition(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let p = 0.3;
    let mut checks = Vec::new();
    let mut gaps = Vec::new();
    for &cells in &cfg.lemma_levels {
        let spec = lemma_spec(cfg, cells)?;
        let k = spec.build()?;
        let density = TargetSpec::GaussianMixture { means: vec![0.55], sds: vec![0.12], weights: vec![1.0] }
            .measure(spec.space.clone())?;
        let atoms = cfg
            .lemma_atoms
            .iter()
            .map(|&(x, m)| Ok((cell_at(&spec, x)?, m)))
            .collect::<Result<Vec<_>>>()?;
        let premise = atoms.iter().map(|&(c, _)| k.rejection()[c]).fold(f64::INFINITY, f64::min);
        if !(premise > 0.0) {
            checks.push(
                Check { id: format!("premise.m{cells}"), value: premise, bound: 0.0, verdict: Verdict::Invalid, detail: String::new() }
                    .with_detail("an atom sits where r = 0: its singular part has infinite rate"),
            );
            continue;
        }
        let nu = HybridMeasure::new(density, atoms, p)?;
        let h = rate_hybrid(&nu, &k, &cfg.rate)?;
        let gap = h.gap.unwrap_or(f64::INFINITY);
        checks.push(Check::info(format!("gap.m{cells}"), gap));
        gaps.push(gap);
    }
    if checks.iter().any(|c| c.verdict == Verdict::Invalid) {
        return Ok(checks);
    }
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    checks.push(Check::holds("gap_decreasing", decreasing, *gaps.last().unwrap_or(&f64::NAN), gaps[0]));
    Ok(checks)
}

fn c7_legendre(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut rng = stream_rng(cfg.seed, 7);
    let n = 4096;
    let (mut gap, mut varadhan, mut twisted) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..5 {
        let m = rng.gen_range(2..=5);
        let k = random_finite_kernel(&mut rng, m)?;
        for _ in 0..10 {
            let f: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rep = legendre_check(&k, &f, &cfg.rate)?;
            gap = gap.max(rep.gap);
            twisted = twisted.max(rep.twisted_residual);
            let limit = -scgf_perron(&k, &f.iter().map(|v| -v).collect::<Vec<_>>(), &cfg.rate)?.log_lambda;
            let finite_n = -laplace_log(&k, &f, n, 0)? / n as f64;
            varadhan = varadhan.max((finite_n - limit).abs());
        }
    }
    Ok(vec![
        Check::at_most("legendre_gap", gap, 1e-6).with_detail("5 instances x 10 observables"),
        Check::at_most("varadhan_n4096", varadhan, 5e-3),
        Check::info("twisted_invariance", twisted),
    ])
}

fn c8_exact_law(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut rng = stream_rng(cfg.seed, 8);
    let k = random_finite_kernel(&mut rng, 3)?;
    let n = 12;
    let law = enumerate_empirical_law(&k, n, 0)?;
    let mut checks = vec![Check::at_most("enumeration_mass", (law.total_mass() - 1.0).abs(), 1e-10)];
    let pi = DiscreteMeasure::new(k.space().clone(), k.target().to_vec())?;
    let skewed = DiscreteMeasure::new(k.space().clone(), vec![0.6, 0.25, 0.15])?;
    let cases = [(&pi, 0.15, Metric::Tv), (&pi, 0.3, Metric::Tv), (&skewed, 0.25, Metric::Tv), (&skewed, 0.2, Metric::Lp)];
    for (i, (nu, delta, metric)) in cases.into_iter().enumerate() {
        let (exact, _) = law.ball_mass(nu, delta, metric)?;
        let est = mc_ball_probability(&k, nu, delta, n, cfg.mc_reps, cfg.seed.wrapping_add(i as u64), metric, 0)?;
        let se = (exact * (1.0 - exact) / cfg.mc_reps as f64).sqrt();
        let z = if se > 0.0 { (est.estimate - exact).abs() / se } else { (est.estimate - exact).abs() * f64::INFINITY };
        checks.push(
            Check::at_most(format!("ball{i}.z_score"), if z.is_nan() { 0.0 } else { z }, 3.0)
                .with_detail(format!("exact {exact:.5}, mc {:.5}", est.estimate)),
        );
    }
    Ok(checks)
}

/// Least-squares slope of `log y` against `log x`.
fn log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// Runs the smoothing sweep for one grid size.
pub fn smoothing_run(cfg: &VerifyConfig, cells: usize) -> Result<(KernelSpec, AtomSample, SweepSummary)> {
    let spec = smoothing_spec(cells)?;
    let k = spec.build()?;
    let atoms = SMOOTHING_ATOMS
        .iter()
        .map(|&(x, m)| Ok((cell_at(&spec, x)?, m)))
        .collect::<Result<Vec<_>>>()?;
    let n_max = cfg.smoothing_ns.iter().cloned().max().unwrap_or(1);
    let sample = AtomSample::draw(atoms, n_max, cfg.seed)?;
    let summary = smoothing_sweep(&k, &sample, &cfg.smoothing_ns, &cfg.rate)?;
    Ok((spec, sample, summary))
}

fn c9_smoothing(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let finest = cfg.smoothing_cells.iter().cloned().max().unwrap_or(0);
    for &cells in &cfg.smoothing_cells {
        let (spec, _, s) = smoothing_run(cfg, cells)?;
        let h = spec.space.width().unwrap_or(0.0);
        let tag = format!("m{cells}");
        let mass = s.rows.iter().map(|r| r.mass_error).fold(0.0, f64::max);
        let inv = s.rows.iter().map(|r| r.invariance_residual).fold(0.0, f64::max);
        let excess = s.rows.iter().map(|r| r.rate.to_f64() - r.bound).fold(f64::NEG_INFINITY, f64::max);
        let w1_split = s
            .rows
            .iter()
            .map(|r| r.w1_to_nu_s - (r.varrho + r.w1_empirical + h))
            .fold(f64::NEG_INFINITY, f64::max);
        let ns: Vec<f64> = s.rows.iter().map(|r| r.n as f64).collect();
        let w1: Vec<f64> = s.rows.iter().map(|r| r.w1_to_nu_s).collect();
        let slope = log_slope(&ns, &w1);
        let rises = w1.windows(2).filter(|w| w[1] >= w[0]).count();
        let rate_gaps: Vec<f64> = s.rows.iter().map(|r| (r.rate.to_f64() - s.singular_rate).abs()).collect();
        checks.push(Check::at_most(format!("{tag}.mass"), mass, 1e-10).with_detail(format!("{} values of n", s.rows.len())));
        checks.push(Check::at_most(format!("{tag}.invariance"), inv, 1e-8));
        checks.push(Check::at_most(format!("{tag}.rate_minus_bound"), excess, 1e-6));
        checks.push(Check::at_most(format!("{tag}.w1_split"), w1_split, 0.0));
        checks.push(Check::holds(
            format!("{tag}.w1_trend"),
            slope < 0.0 && w1.last() < w1.first(),
            slope,
            0.0,
        ));
        checks.push(Check::info(format!("{tag}.w1_rises"), rises as f64).with_detail("steps where W1 did not decrease"));
        checks.push(Check::info(
            format!("{tag}.gap_rises"),
            rate_gaps.windows(2).filter(|w| w[1] >= w[0]).count() as f64,
        ));
        checks.push(Check::info(format!("{tag}.skipped"), s.skipped.len() as f64));
        if cells == finest {
            checks.push(Check::at_most(format!("{tag}.final_gap"), s.final_gap, 0.05));
        } else {
            checks.push(Check::info(format!("{tag}.final_gap"), s.final_gap));
        }
    }
    Ok(checks)
}

fn c10_mixing(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut rng = stream_rng(cfg.seed, 10);
    let (mut tv_err, mut lp_excess, mut rate_excess) = (0.0f64, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for _ in 0..10 {
        let m = rng.gen_range(2..=6);
        let k = random_finite_kernel(&mut rng, m)?;
        let pi = DiscreteMeasure::new(k.space().clone(), k.target().to_vec())?;
        let dag = random_measure(&mut rng, k.space().clone(), 0.5)?;
        let delta = rng.gen_range(0.05..1.95);
        let star = mix_with_target(&dag, delta, &pi)?;
        tv_err = tv_err.max((tv_norm(&star, &dag)? - delta / 4.0 * tv_norm(&pi, &dag)?).abs());
        lp_excess = lp_excess.max(lp_distance(&star, &dag)? - delta / 2.0);
        let i_star = rate_primal_sinkhorn(&star, &k, &cfg.rate)?.value;
        let i_dag = rate_primal_sinkhorn(&dag, &k, &cfg.rate)?.value;
        if let (ExtReal::Finite(a), ExtReal::Finite(b)) = (i_star, i_dag) {
            rate_excess = rate_excess.max(a - (1.0 - delta / 4.0) * b);
        } else if i_dag.is_finite() {
            rate_excess = f64::INFINITY;
        }
    }
    Ok(vec![
        Check::at_most("tv_identity", tv_err, 1e-12).with_detail("10 fixtures"),
        Check::at_most("lp_minus_half_delta", lp_excess, 1e-12),
        Check::at_most("rate_minus_convex_bound", rate_excess, 1e-6),
    ])
}

fn c11_witness(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut min_r = f64::INFINITY;
    let mut missing = 0usize;
    let instances: Vec<MhKernel> = finite_instances(cfg)?.into_iter().chain(grid_instances(cfg)?).collect();
    for k in &instances {
        match condition_de_witness(k) {
            Ok(w) => min_r = min_r.min(w.rejection),
            Err(Error::Precondition(_)) => missing += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(vec![
        Check::at_most("instances_without_witness", missing as f64, 0.0).with_detail(format!("{} instances", instances.len())),
        Check::holds("witness_rejection", min_r > 1e-9, min_r, 1e-9),
    ])
}

fn c12_convexity(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut rng = stream_rng(cfg.seed, 12);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..10 {
        let m = rng.gen_range(2..=7);
        let k = random_finite_kernel(&mut rng, m)?;
        let a = random_measure(&mut rng, k.space().clone(), 0.3)?;
        let b = random_measure(&mut rng, k.space().clone(), 0.3)?;
        let ia = rate_primal_sinkhorn(&a, &k, &cfg.rate)?.value.to_f64();
        let ib = rate_primal_sinkhorn(&b, &k, &cfg.rate)?.value.to_f64();
        for t in [0.25, 0.5, 0.75] {
            let mix = a.mix(&b, t)?;
            let im = rate_primal_sinkhorn(&mix, &k, &cfg.rate)?.value.to_f64();
            worst = worst.max(im - (t * ia + (1.0 - t) * ib));
        }
    }
    Ok(vec![Check::at_most("convexity_excess", worst, 2e-6).with_detail("30 spot checks")])
}
