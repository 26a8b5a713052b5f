use mh_ldp::kernel::{condition_de_witness, ConditionWitness, KernelDiagnostics};
use mh_ldp::rate::{laplace_limit, legendre_check, rate_report, RateOptions, RateSummary};
use mh_ldp::sampler::{empirical_measure, laplace_sweep, mc_ball_probability, run_chain, BallEstimate};
use mh_ldp::smoothing::{smoothing_sweep, AtomSample, SweepSummary};
use mh_ldp::verify::{run_suite, SuiteReport, Verdict};
use mh_ldp::{Error, MhKernel, StateSpace, StochasticKernel};
use serde::Serialize;

use crate::config::{Command, Defaults, ScenarioConfig, VerifyBlock};
use crate::error::CliError;
use crate::output::{ext, num, Csv, OutputDir};

/// Settings after command-line overrides.
pub struct Effective {
    pub seed: Option<u64>,
    pub tolerances: RateOptions,
}

impl Effective {
    fn seed(&self, command: Command) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config(format!("\"{}\" is stochastic and needs a seed", command.name())))
    }
}

/// Runs one command and returns its exit code; only `verify` can finish
/// with a nonzero code without an error.
pub fn run(command: Command, cfg: &ScenarioConfig, eff: &Effective, out: &mut OutputDir) -> Result<i32, CliError> {
    if command.stochastic() {
        eff.seed(command)?;
    }
    match command {
        Command::Kernel => kernel(cfg, out),
        Command::Rate => rate(cfg, eff, out),
        Command::Legendre => legendre(cfg, eff, out),
        Command::Sample => sample(cfg, eff, out),
        Command::Laplace => laplace(cfg, eff, out),
        Command::Smooth => smooth(cfg, eff, out),
        Command::Verify => verify(cfg, eff, out),
    }
    .map(|code| code.unwrap_or(0))
}

type Outcome = Result<Option<i32>, CliError>;

fn build(cfg: &ScenarioConfig) -> Result<MhKernel, CliError> {
    Ok(cfg.require_kernel()?.build()?)
}

fn point(space: &StateSpace, i: usize) -> String {
    space.point(i).map(num).unwrap_or_else(|| i.to_string())
}

#[derive(Serialize)]
struct KernelJson {
    states: usize,
    diagnostics: KernelDiagnostics,
    /// `None` when no state carries a rejection atom.
    witness: Option<ConditionWitness>,
}

fn kernel(cfg: &ScenarioConfig, out: &mut OutputDir) -> Outcome {
    let k = build(cfg)?;
    let space = k.space().clone();
    let witness = match condition_de_witness(&k) {
        Ok(w) => Some(w),
        Err(Error::Precondition(_)) => None,
        Err(e) => return Err(e.into()),
    };
    out.json("kernel.json", &KernelJson { states: k.len(), diagnostics: k.diagnostics(), witness })?;
    let mut states = Csv::new(&["i", "x", "pi", "r"]);
    for i in 0..k.len() {
        states.row(&[i.to_string(), point(&space, i), num(k.target()[i]), num(k.rejection()[i])]);
    }
    out.csv("states.csv", states)?;
    let mut entries = Csv::new(&["i", "j", "k", "a"]);
    for i in 0..k.len() {
        for j in 0..k.len() {
            let v = k.kernel()[(i, j)];
            if v != 0.0 {
                entries.row(&[i.to_string(), j.to_string(), num(v), num(k.accept()[(i, j)])]);
            }
        }
    }
    out.csv("kernel.csv", entries)?;
    Ok(None)
}

#[derive(Serialize)]
struct RateJson {
    nu: Vec<f64>,
    #[serde(flatten)]
    summary: RateSummary,
    marginal_residuals: Option<(f64, f64)>,
    invariance_residual: Option<f64>,
}

fn rate(cfg: &ScenarioConfig, eff: &Effective, out: &mut OutputDir) -> Outcome {
    let block = ScenarioConfig::block(&cfg.rate, "rate")?;
    let k = build(cfg)?;
    let nu = block.nu.measure(k.space().clone())?;
    let rep = rate_report(&nu, &k, &eff.tolerances)?;
    out.json(
        "rate.json",
        &RateJson {
            nu: nu.weights().to_vec(),
            summary: rep.summary(),
            marginal_residuals: rep.coupling.as_ref().map(|c| c.marginal_residuals(&nu)),
            invariance_residual: rep.extraction.as_ref().map(|e| e.q.invariance_residual(&nu)),
        },
    )?;
    if let Some(c) = &rep.coupling {
        let mut gamma = Csv::new(&["i", "j", "gamma"]);
        for (a, &i) in c.support().iter().enumerate() {
            for (b, &j) in c.support().iter().enumerate() {
                gamma.row(&[i.to_string(), j.to_string(), num(c.block()[(a, b)])]);
            }
        }
        out.csv("gamma.csv", gamma)?;
    }
    if let Some(ex) = &rep.extraction {
        let s = ex.q.support();
        let mut q = Csv::new(&["i", "j", "q"]);
        let mut alpha = Csv::new(&["i", "j", "alpha"]);
        let mut rho = Csv::new(&["i", "rho"]);
        for (a, &i) in s.iter().enumerate() {
            for (b, &j) in s.iter().enumerate() {
                q.row(&[i.to_string(), j.to_string(), num(ex.q.block()[(a, b)])]);
                alpha.row(&[i.to_string(), j.to_string(), num(ex.split.alpha()[(a, b)])]);
            }
            rho.row(&[i.to_string(), num(ex.split.rho()[a])]);
        }
        out.csv("q.csv", q)?;
        out.csv("alpha.csv", alpha)?;
        out.csv("rho.csv", rho)?;
    }
    Ok(None)
}

fn legendre(cfg: &ScenarioConfig, eff: &Effective, out: &mut OutputDir) -> Outcome {
    let block = ScenarioConfig::block(&cfg.legendre, "legendre")?;
    let k = build(cfg)?;
    let rep = legendre_check(&k, &block.f, &eff.tolerances)?;
    let mut csv = Csv::new(&["i", "f", "nu_star"]);
    for (i, (f, m)) in block.f.iter().zip(&rep.nu_star).enumerate() {
        csv.row(&[i.to_string(), num(*f), num(*m)]);
    }
    out.json("legendre.json", &rep)?;
    out.csv("nu_star.csv", csv)?;
    Ok(None)
}

#[derive(Serialize)]
struct SampleJson {
    seed: u64,
    x0: usize,
    n: usize,
    ball: Option<BallEstimate>,
}

fn sample(cfg: &ScenarioConfig, eff: &Effective, out: &mut OutputDir) -> Outcome {
    let block = cfg.sample.clone().unwrap_or_default();
    let seed = eff.seed(Command::Sample)?;
    let k = build(cfg)?;
    let space = k.space().clone();
    let path = run_chain(&k, block.x0, block.n, seed)?;
    let emp = empirical_measure(&space, &path)?;
    let ball = match &block.ball {
        Some(b) => {
            let nu = b.nu.measure(space.clone())?;
            // Replicas use their own streams of the seed, apart from the path.
            Some(mc_ball_probability(&k, &nu, b.delta, block.n, b.reps, seed, b.metric, block.x0)?)
        }
        None => None,
    };
    out.write("trajectory.csv", path.to_csv().into_bytes())?;
    let mut csv = Csv::new(&["i", "x", "count", "mass"]);
    for (i, &c) in emp.counts.iter().enumerate() {
        csv.row(&[i.to_string(), point(&space, i), c.to_string(), num(emp.measure.mass(i))]);
    }
    out.csv("empirical.csv", csv)?;
    out.json("sample.json", &SampleJson { seed, x0: block.x0, n: block.n, ball })?;
    Ok(None)
}

#[derive(Serialize)]
struct LaplaceJson {
    /// `min_nu { nu(f) + I(nu) } = -Lambda(-f)`
    limit: f64,
    final_gap: f64,
    /// Errors `|-(1/n) log E - limit|` never increase along the sweep.
    monotone: bool,
    x0: usize,
}

fn laplace(cfg: &ScenarioConfig, eff: &Effective, out: &mut OutputDir) -> Outcome {
    let block = ScenarioConfig::block(&cfg.laplace, "laplace")?;
    let k = build(cfg)?;
    let limit = laplace_limit(&k, &block.f, &eff.tolerances)?;
    let points = laplace_sweep(&k, &block.f, &block.ns, block.x0)?;
    let errs: Vec<f64> = points.iter().map(|p| (p.minus_log_over_n - limit).abs()).collect();
    let mut csv = Csv::new(&["n", "value", "log_value", "minus_log_over_n", "error"]);
    for (p, e) in points.iter().zip(&errs) {
        csv.row(&[p.n.to_string(), num(p.value), num(p.log_value), num(p.minus_log_over_n), num(*e)]);
    }
    out.csv("laplace.csv", csv)?;
    out.json(
        "laplace.json",
        &LaplaceJson {
            limit,
            final_gap: errs.last().cloned().unwrap_or(f64::NAN),
            monotone: errs.windows(2).all(|w| w[1] <= w[0]),
            x0: block.x0,
        },
    )?;
    Ok(None)
}

#[derive(Serialize)]
struct SmoothJson {
    seed: u64,
    atoms: Vec<(usize, f64)>,
    #[serde(flatten)]
    summary: SweepSummary,
    limsup_tol: f64,
    /// `I(nu_s^n) <= sum m_k log(1/r(x_k)) + limsup_tol` at the largest `n`.
    limsup_holds: bool,
}

fn smooth(cfg: &ScenarioConfig, eff: &Effective, out: &mut OutputDir) -> Outcome {
    let block = ScenarioConfig::block(&cfg.smooth, "smooth")?;
    let seed = eff.seed(Command::Smooth)?;
    let k = build(cfg)?;
    let grid = k
        .space()
        .as_grid()
        .ok_or_else(|| CliError::Config("\"smooth\" needs a grid space".into()))?
        .clone();
    let atoms = block
        .atoms
        .iter()
        .map(|&(x, m)| {
            if x > grid.lo() && x < grid.hi() {
                Ok((grid.cell_of(x), m))
            } else {
                Err(CliError::Config(format!("atom at {x} lies outside the grid")))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n_max = block.ns.iter().cloned().max().unwrap_or(1);
    let draws = AtomSample::draw(atoms.clone(), n_max, seed)?;
    let summary = smoothing_sweep(&k, &draws, &block.ns, &eff.tolerances)?;
    let last = summary
        .rows
        .last()
        .ok_or_else(|| CliError::Config("every n has V_n >= 1; use larger n".into()))?;
    let limsup_holds = last.rate.to_f64() <= summary.singular_rate + block.limsup_tol;
    let mut csv = Csv::new(&["n", "varrho_n", "V_n", "I_nu_s_n", "bound", "W1_to_nu_s", "invariance_residual"]);
    for r in &summary.rows {
        csv.row(&[
            r.n.to_string(),
            num(r.varrho),
            num(r.volume),
            ext(r.rate),
            num(r.bound),
            num(r.w1_to_nu_s),
            num(r.invariance_residual),
        ]);
    }
    out.csv("smoothing.csv", csv)?;
    out.json("smoothing.json", &SmoothJson { seed, atoms, summary, limsup_tol: block.limsup_tol, limsup_holds })?;
    Ok(None)
}

fn verify(cfg: &ScenarioConfig, eff: &Effective, out: &mut OutputDir) -> Outcome {
    let VerifyBlock { suite, mut overrides } = cfg.verify.clone().unwrap_or_default();
    if let Some(spec) = cfg.kernel_spec()? {
        overrides.lemma_kernel = Some(spec);
    }
    if let Some(seed) = eff.seed {
        overrides.seed = seed;
    }
    if cfg.tolerances.is_some() || eff.tolerances != Defaults::tolerances() {
        overrides.rate = eff.tolerances;
    }
    let report = run_suite(&suite, &overrides)?;
    print_table(&report);
    let mut csv = Csv::new(&["criterion", "check", "value", "bound", "verdict"]);
    for (n, c) in report.checks() {
        csv.row(&[n.to_string(), c.id.clone(), num(c.value), num(c.bound), verdict(c.verdict).to_string()]);
    }
    out.csv("verify.csv", csv)?;
    out.json("verify.json", &report)?;
    Ok(Some(report.exit_code()))
}

fn verdict(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::Fail => "fail",
        Verdict::Invalid => "invalid",
        Verdict::Info => "info",
    }
}

fn print_table(report: &SuiteReport) {
    println!("{:<4} {:<30} {:>14} {:>12}  verdict", "crit", "check", "value", "bound");
    for (n, c) in report.checks() {
        println!("{n:<4} {:<30} {:>14.6e} {:>12.3e}  {}", c.id, c.value, c.bound, verdict(c.verdict));
    }
    for c in &report.criteria {
        println!("{}", c.summary_line());
    }
}

