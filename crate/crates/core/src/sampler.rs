//! Chain simulation, empirical measures and exact Laplace functionals.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{MhKernel, StochasticKernel};
use crate::matrix::Matrix;
use crate::measures::{lp_distance, tv_norm, w1_distance, DiscreteMeasure, StateSpace};

/// Enumeration budget on the number of paths, `m^n`.
pub const ENUMERATION_BUDGET: u64 = 10_000_000;

/// Generator for replica `replica` under `root`. ChaCha is counter based, so
/// distinct stream ids give independent, reproducible sequences.
pub fn stream_rng(root: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(replica);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub seed: u64,
    pub x0: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// One state index per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state\n");
        for s in &self.states {
            out.push_str(&s.to_string());
            out.push('\n');
        }
        out
    }
}

/// Reusable proposal CDFs for simulating an MH kernel.
pub struct ChainSampler<'a> {
    kernel: &'a MhKernel,
    cdf: Vec<Vec<f64>>,
}

impl<'a> ChainSampler<'a> {
    pub fn new(kernel: &'a MhKernel) -> Self {
        let p = kernel.proposal();
        let cdf = (0..p.rows())
            .map(|i| {
                let mut acc = 0.0;
                p.row(i)
                    .iter()
                    .map(|v| {
                        acc += v;
                        acc
                    })
                    .collect()
            })
            .collect();
        ChainSampler { kernel, cdf }
    }

    /// One MH update: propose by inverse CDF, accept with one uniform.
    pub fn step<R: Rng>(&self, x: usize, rng: &mut R) -> usize {
        let row = &self.cdf[x];
        let u: f64 = rng.gen::<f64>() * row[row.len() - 1];
        let y = row.partition_point(|&c| c <= u).min(row.len() - 1);
        let accept: f64 = rng.gen();
        if y == x || accept < self.kernel.ratio(x, y) {
            y
        } else {
            x
        }
    }

    fn check_start(&self, x0: usize, n: usize) -> Result<()> {
        let m = self.cdf.len();
        if n == 0 {
            return Err(Error::Precondition("chain length must be at least 1".into()));
        }
        if x0 >= m || self.kernel.target()[x0] <= 0.0 {
            return Err(Error::Precondition(format!("initial state {x0} is outside the positive set")));
        }
        Ok(())
    }

    /// `n` states `X_0 = x0, ..., X_{n-1}` from the given generator.
    pub fn run<R: Rng>(&self, x0: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        self.check_start(x0, n)?;
        let mut states = Vec::with_capacity(n);
        let mut x = x0;
        states.push(x);
        for _ in 1..n {
            x = self.step(x, rng);
            states.push(x);
        }
        Ok(states)
    }

    fn visit_counts<R: Rng>(&self, x0: usize, n: usize, rng: &mut R) -> Vec<u32> {
        let mut counts = vec![0u32; self.cdf.len()];
        let mut x = x0;
        counts[x] += 1;
        for _ in 1..n {
            x = self.step(x, rng);
            counts[x] += 1;
        }
        counts
    }
}

pub fn run_chain(k: &MhKernel, x0: usize, n: usize, seed: u64) -> Result<Trajectory> {
    let mut rng = stream_rng(seed, 0);
    let states = ChainSampler::new(k).run(x0, n, &mut rng)?;
    Ok(Trajectory { states, seed, x0 })
}

/// `L^n = (1/n) sum_{i<n} delta_{X_i}`, with the visit counts kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    pub measure: DiscreteMeasure,
    pub counts: Vec<u32>,
    pub n: usize,
}

fn counts_to_measure(space: &Arc<StateSpace>, counts: &[u32], n: usize) -> DiscreteMeasure {
    let w = counts.iter().map(|&c| c as f64 / n as f64).collect();
    DiscreteMeasure::from_unnormalized(space.clone(), w).expect("counts of a nonempty path")
}

pub fn empirical_measure(space: &Arc<StateSpace>, t: &Trajectory) -> Result<EmpiricalMeasure> {
    if t.is_empty() {
        return Err(Error::Precondition("empty trajectory".into()));
    }
    let m = space.len();
    let mut counts = vec![0u32; m];
    for &s in &t.states {
        if s >= m {
            return Err(Error::DimensionMismatch { expected: m, got: s + 1 });
        }
        counts[s] += 1;
    }
    let n = t.len();
    Ok(EmpiricalMeasure { measure: counts_to_measure(space, &counts, n), counts, n })
}

/// Sup-norm normalization: divides by the largest entry and returns its log.
fn renormalize(m: &mut Matrix) -> f64 {
    let s = m.max_abs();
    if s == 0.0 || !s.is_finite() {
        return 0.0;
    }
    m.scale_in_place(1.0 / s);
    s.ln()
}

/// `M^e` as a matrix with max entry 1 times `exp(log_scale)`.
fn scaled_power(base: &Matrix, mut e: usize) -> (Matrix, f64) {
    let mut result = Matrix::identity(base.rows());
    let mut result_log = 0.0;
    let mut b = base.clone();
    let mut b_log = 0.0;
    while e > 0 {
        if e & 1 == 1 {
            result = result.matmul(&b);
            result_log += b_log + renormalize(&mut result);
        }
        e >>= 1;
        if e > 0 {
            b = b.matmul(&b);
            b_log = 2.0 * b_log + renormalize(&mut b);
        }
    }
    (result, result_log)
}

/// `log E_{x0}[exp(-sum_{i<n} f(X_i))] = log [D (K D)^{n-1} 1]_{x0}` with
/// `D = diag(e^{-f})`.
pub fn laplace_log<K: StochasticKernel + ?Sized>(k: &K, f: &[f64], n: usize, x0: usize) -> Result<f64> {
    let m = k.len();
    if f.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: f.len() });
    }
    if n == 0 {
        return Err(Error::Precondition("n must be at least 1".into()));
    }
    if x0 >= m {
        return Err(Error::Precondition(format!("initial state {x0} out of range")));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("observable must be finite".into()));
    }
    if f.iter().all(|v| *v == f[0]) {
        // Rows of K sum to one, so a constant observable factors out exactly.
        return Ok(-(n as f64) * f[0]);
    }
    let kmat = k.matrix();
    let tilted = Matrix::from_fn(m, m, |i, j| kmat[(i, j)] * (-f[j]).exp());
    let (power, log_scale) = scaled_power(&tilted, n - 1);
    let v: f64 = power.row(x0).iter().sum();
    Ok(-f[x0] + log_scale + v.ln())
}

pub fn laplace_functional_exact<K: StochasticKernel + ?Sized>(k: &K, f: &[f64], n: usize, x0: usize) -> Result<f64> {
    Ok(laplace_log(k, f, n, x0)?.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplacePoint {
    pub n: usize,
    pub value: f64,
    pub log_value: f64,
    pub minus_log_over_n: f64,
}

pub fn laplace_sweep<K: StochasticKernel + ?Sized>(k: &K, f: &[f64], ns: &[usize], x0: usize) -> Result<Vec<LaplacePoint>> {
    ns.iter()
        .map(|&n| {
            let log_value = laplace_log(k, f, n, x0)?;
            Ok(LaplacePoint { n, value: log_value.exp(), log_value, minus_log_over_n: -log_value / n as f64 })
        })
        .collect()
}

/// Exact law of the visit-count vector of `X_0..X_{n-1}`, plus the law of
/// `X_{n-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalLaw {
    pub n: usize,
    pub by_counts: BTreeMap<Vec<u32>, f64>,
    pub final_state: Vec<f64>,
}

impl EmpiricalLaw {
    pub fn total_mass(&self) -> f64 {
        self.by_counts.values().sum()
    }

    /// Probability that `L^n` lies within `delta` of `nu`, as (open, closed)
    /// balls.
    pub fn ball_mass(&self, nu: &DiscreteMeasure, delta: f64, metric: Metric) -> Result<(f64, f64)> {
        let (mut open, mut closed) = (0.0, 0.0);
        for (counts, p) in &self.by_counts {
            let d = metric.distance(&counts_to_measure(nu.space(), counts, self.n), nu)?;
            if d < delta {
                open += p;
            }
            if d <= delta {
                closed += p;
            }
        }
        Ok((open, closed))
    }
}

/// Depth-first enumeration of every path of length `n` from `x0`.
pub fn enumerate_empirical_law<K: StochasticKernel + ?Sized>(k: &K, n: usize, x0: usize) -> Result<EmpiricalLaw> {
    let m = k.len();
    if n == 0 || x0 >= m {
        return Err(Error::Precondition("need n >= 1 and a valid initial state".into()));
    }
    let paths = (m as u64).checked_pow(n as u32);
    if paths.is_none_or(|p| p > ENUMERATION_BUDGET) {
        return Err(Error::Capability(format!(
            "enumerating {m}^{n} paths exceeds the budget of {ENUMERATION_BUDGET}"
        )));
    }
    let mut law = EmpiricalLaw { n, by_counts: BTreeMap::new(), final_state: vec![0.0; m] };
    let mut counts = vec![0u32; m];
    counts[x0] = 1;
    dfs(k.matrix(), n - 1, x0, 1.0, &mut counts, &mut law);
    Ok(law)
}

fn dfs(k: &Matrix, remaining: usize, x: usize, prob: f64, counts: &mut Vec<u32>, law: &mut EmpiricalLaw) {
    if remaining == 0 {
        *law.by_counts.entry(counts.clone()).or_insert(0.0) += prob;
        law.final_state[x] += prob;
        return;
    }
    for (y, &p) in k.row(x).iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        counts[y] += 1;
        dfs(k, remaining - 1, y, prob * p, counts, law);
        counts[y] -= 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Tv,
    W1,
    Lp,
}

impl Metric {
    pub fn distance(self, a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<f64> {
        match self {
            Metric::Tv => tv_norm(a, b),
            Metric::W1 => w1_distance(a, b),
            Metric::Lp => lp_distance(a, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallEstimate {
    pub estimate: f64,
    pub stderr: f64,
    /// Same estimate for the closed ball; differs only when some `L^n` sits
    /// exactly at distance `delta`.
    pub closed_estimate: f64,
    pub closed_stderr: f64,
    pub reps: usize,
    pub metric: Metric,
    pub delta: f64,
}

/// Monte Carlo estimate of `P(d(L^n, nu) < delta)` over independent
/// replicas; replica `i` uses stream `i` of the root seed.
#[allow(clippy::too_many_arguments)]
pub fn mc_ball_probability(
    k: &MhKernel,
    nu: &DiscreteMeasure,
    delta: f64,
    n: usize,
    reps: usize,
    seed: u64,
    metric: Metric,
    x0: usize,
) -> Result<BallEstimate> {
    if reps == 0 {
        return Err(Error::Precondition("need at least one replica".into()));
    }
    let sampler = ChainSampler::new(k);
    sampler.check_start(x0, n)?;
    let space = nu.space().clone();
    let hits: Vec<(bool, bool)> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r);
            let counts = sampler.visit_counts(x0, n, &mut rng);
            let d = metric.distance(&counts_to_measure(&space, &counts, n), nu)?;
            Ok((d < delta, d <= delta))
        })
        .collect::<Result<_>>()?;
    let open = hits.iter().filter(|h| h.0).count() as f64 / reps as f64;
    let closed = hits.iter().filter(|h| h.1).count() as f64 / reps as f64;
    let se = |p: f64| (p * (1.0 - p) / reps as f64).sqrt();
    Ok(BallEstimate {
        estimate: open,
        stderr: se(open),
        closed_estimate: closed,
        closed_stderr: se(closed),
        reps,
        metric,
        delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_kernel, ProposalSpec, TargetSpec};

    fn two_state() -> MhKernel {
        let space = Arc::new(StateSpace::finite(2).unwrap());
        build_kernel(&TargetSpec::Probabilities { probs: vec![2.0 / 3.0, 1.0 / 3.0] }, &ProposalSpec::Uniform, space)
            .unwrap()
    }

    fn three_state() -> MhKernel {
        let space = Arc::new(StateSpace::finite_with_points(vec![0.0, 0.5, 1.0]).unwrap());
        build_kernel(
            &TargetSpec::Probabilities { probs: vec![0.5, 0.3, 0.2] },
            &ProposalSpec::Matrix {
                rows: vec![vec![0.2, 0.5, 0.3], vec![0.4, 0.2, 0.4], vec![0.3, 0.3, 0.4]],
            },
            space,
        )
        .unwrap()
    }

    #[test]
    fn run_chain_is_deterministic() {
        let k = two_state();
        let a = run_chain(&k, 0, 500, 42).unwrap();
        let b = run_chain(&k, 0, 500, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.states, run_chain(&k, 0, 500, 43).unwrap().states);
        for w in a.states.windows(2) {
            assert!(k.kernel()[(w[0], w[1])] > 0.0);
        }
    }

    #[test]
    fn no_rejection_means_every_proposal_accepted() {
        let space = Arc::new(StateSpace::finite(3).unwrap());
        let rows = vec![vec![0.1, 0.45, 0.45], vec![0.45, 0.1, 0.45], vec![0.45, 0.45, 0.1]];
        let k = build_kernel(&TargetSpec::Uniform, &ProposalSpec::Matrix { rows }, space).unwrap();
        assert!(k.rejection().iter().all(|r| *r == 0.0));
        let s = ChainSampler::new(&k);
        // Replay the proposal draws alone; the chain must follow them.
        let mut rng = stream_rng(7, 0);
        let mut replay = stream_rng(7, 0);
        let mut x = 0;
        for _ in 0..1000 {
            let u: f64 = replay.gen::<f64>() * s.cdf[x][2];
            let y = s.cdf[x].partition_point(|&c| c <= u).min(2);
            let _: f64 = replay.gen();
            x = s.step(x, &mut rng);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn start_outside_positive_set_rejected() {
        let space = Arc::new(StateSpace::finite(2).unwrap());
        let k = build_kernel(&TargetSpec::Probabilities { probs: vec![1.0, 0.0] }, &ProposalSpec::Uniform, space)
            .unwrap();
        assert!(matches!(run_chain(&k, 1, 10, 0), Err(Error::Precondition(_))));
        assert!(run_chain(&k, 0, 0, 0).is_err());
    }

    #[test]
    fn long_run_frequencies_match_target() {
        let k = three_state();
        let n = 200_000;
        let t = run_chain(&k, 0, n, 2024).unwrap();
        let emp = empirical_measure(k.space(), &t).unwrap();
        // Batch means give a standard error that accounts for autocorrelation.
        let batches = 100;
        let size = n / batches;
        for (s, &p) in k.target().iter().enumerate() {
            let means: Vec<f64> = t
                .states
                .chunks(size)
                .map(|c| c.iter().filter(|&&x| x == s).count() as f64 / size as f64)
                .collect();
            let mean = means.iter().sum::<f64>() / batches as f64;
            let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
            let se = (var / batches as f64).sqrt();
            assert!((emp.measure.mass(s) - p).abs() < 3.0 * se, "state {s}: {} vs {p} (se {se})", emp.measure.mass(s));
        }
    }

    #[test]
    fn empirical_measure_examples() {
        let space = Arc::new(StateSpace::finite(2).unwrap());
        let t = Trajectory { states: vec![0, 0, 1, 0], seed: 0, x0: 0 };
        let e = empirical_measure(&space, &t).unwrap();
        assert_eq!(e.measure.weights(), &[0.75, 0.25]);
        let c = Trajectory { states: vec![1; 5], seed: 0, x0: 1 };
        assert_eq!(empirical_measure(&space, &c).unwrap().measure.weights(), &[0.0, 1.0]);
        let joined = Trajectory { states: [t.states.clone(), c.states[..4].to_vec()].concat(), seed: 0, x0: 0 };
        let j = empirical_measure(&space, &joined).unwrap();
        assert_eq!(j.measure.weights(), &[0.375, 0.625]);
        assert!(empirical_measure(&space, &Trajectory { states: vec![], seed: 0, x0: 0 }).is_err());
    }

    #[test]
    fn laplace_examples() {
        let k = two_state();
        let f = [0.0, 1.0];
        assert!((laplace_functional_exact(&k, &f, 1, 1).unwrap() - (-1f64).exp()).abs() < 1e-15);
        let v = laplace_functional_exact(&k, &f, 2, 0).unwrap();
        assert!((v - (0.75 + 0.25 * (-1f64).exp())).abs() < 1e-15);
        assert!((v - 0.841970).abs() < 1e-6);
        let c = [0.3, 0.3];
        for n in [1, 7, 64, 1000] {
            let l = laplace_log(&k, &c, n, 1).unwrap();
            assert!((l + 0.3 * n as f64).abs() < 1e-9 * n as f64);
        }
    }

    #[test]
    fn laplace_matches_path_sum() {
        let k = three_state();
        let f = [0.4, -0.2, 1.1];
        let n = 7;
        let law = enumerate_empirical_law(&k, n, 2).unwrap();
        let brute: f64 = law
            .by_counts
            .iter()
            .map(|(c, p)| p * (-(0..3).map(|i| c[i] as f64 * f[i]).sum::<f64>()).exp())
            .sum();
        let exact = laplace_functional_exact(&k, &f, n, 2).unwrap();
        assert!((brute - exact).abs() < 1e-13 * exact.max(1.0));
    }

    #[test]
    fn laplace_zero_observable_is_one() {
        let k = three_state();
        for n in [1, 2, 5, 100, 4096, 100_000] {
            assert!((laplace_functional_exact(&k, &[0.0; 3], n, 1).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn laplace_does_not_underflow() {
        let k = three_state();
        let l = laplace_log(&k, &[2.0, 3.0, 4.0], 5000, 0).unwrap();
        assert!(l.is_finite() && l < -9000.0);
    }

    #[test]
    fn laplace_rate_differences_halve() {
        let k = three_state();
        let f = [0.5, -0.3, 0.8];
        let val = |n| -laplace_log(&k, &f, n, 0).unwrap() / n as f64;
        let ns: Vec<usize> = (6..=12).map(|e| 1usize << e).collect();
        let diffs: Vec<f64> = ns.windows(2).map(|w| (val(w[1]) - val(w[0])).abs()).collect();
        for d in diffs.windows(2) {
            let ratio = d[0] / d[1];
            assert!((1.8..2.2).contains(&ratio), "ratio {ratio} from {diffs:?}");
        }
    }

    #[test]
    fn enumeration_examples() {
        let k = two_state();
        let law = enumerate_empirical_law(&k, 2, 0).unwrap();
        assert!((law.by_counts[&vec![2, 0]] - 0.75).abs() < 1e-15);
        assert!((law.by_counts[&vec![1, 1]] - 0.25).abs() < 1e-15);
        assert!((law.total_mass() - 1.0).abs() < 1e-15);
        assert!(matches!(enumerate_empirical_law(&k, 24, 0), Err(Error::Capability(_))));
    }

    #[test]
    fn enumeration_final_state_matches_matrix_power() {
        let k = three_state();
        let n = 9;
        let law = enumerate_empirical_law(&k, n, 1).unwrap();
        let mut row = vec![0.0, 1.0, 0.0];
        for _ in 1..n {
            row = k.kernel().left_mul(&row);
        }
        for (a, b) in law.final_state.iter().zip(&row) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((law.total_mass() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ball_estimates() {
        let k = three_state();
        let pi = DiscreteMeasure::new(k.space().clone(), k.target().to_vec()).unwrap();
        let all = mc_ball_probability(&k, &pi, 2.5, 10, 200, 1, Metric::Tv, 0).unwrap();
        assert_eq!(all.estimate, 1.0);
        assert!(mc_ball_probability(&k, &pi, 0.5, 10, 0, 1, Metric::Tv, 0).is_err());

        let law = enumerate_empirical_law(&k, 8, 0).unwrap();
        for metric in [Metric::Tv, Metric::W1, Metric::Lp] {
            let (open, _) = law.ball_mass(&pi, 0.45, metric).unwrap();
            let mc = mc_ball_probability(&k, &pi, 0.45, 8, 4000, 99, metric, 0).unwrap();
            let se = (open * (1.0 - open) / 4000.0).sqrt();
            assert!((mc.estimate - open).abs() <= 3.0 * se, "{metric:?}: mc {} exact {open}", mc.estimate);
        }
    }

    #[test]
    fn ball_mass_grows_with_n() {
        let k = three_state();
        let pi = DiscreteMeasure::new(k.space().clone(), k.target().to_vec()).unwrap();
        let est: Vec<f64> = [50, 400, 3200]
            .iter()
            .map(|&n| mc_ball_probability(&k, &pi, 0.15, n, 400, 5, Metric::Tv, 0).unwrap().estimate)
            .collect();
        assert!(est[0] < est[1] && est[1] < est[2], "{est:?}");
        assert!(est[2] > 0.95);
    }
}
