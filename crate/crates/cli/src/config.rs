use std::path::PathBuf;
use std::sync::Arc;

use mh_ldp::kernel::KernelSpec;
use mh_ldp::rate::RateOptions;
use mh_ldp::sampler::Metric;
use mh_ldp::verify::VerifyConfig;
use mh_ldp::{StateSpace, TargetSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Every default the front-end uses. A scenario overrides any of these
/// through its command block or `tolerances`.
pub struct Defaults;

impl Defaults {
    pub const OUT_DIR: &'static str = "mh-ldp-out";
    /// Chain length for `sample`.
    pub const SAMPLE_N: usize = 1000;
    pub const BALL_REPS: usize = 10_000;
    /// `n = 2^4 .. 2^12` for `laplace`.
    pub fn laplace_ns() -> Vec<usize> {
        (4..=12).map(|e| 1usize << e).collect()
    }
    /// `n = 4, 8, .., 256` for `smooth`.
    pub fn smoothing_ns() -> Vec<usize> {
        (2..=8).map(|e| 1usize << e).collect()
    }
    /// Slack on `I(nu_s^n) <= sum m_k log(1/r(x_k))` at the largest `n`.
    pub const LIMSUP_TOL: f64 = 0.05;
    pub const SUITE: &'static str = "all";
    pub fn tolerances() -> RateOptions {
        RateOptions::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Kernel,
    Rate,
    Legendre,
    Sample,
    Laplace,
    Smooth,
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Kernel => "kernel",
            Command::Rate => "rate",
            Command::Legendre => "legendre",
            Command::Sample => "sample",
            Command::Laplace => "laplace",
            Command::Smooth => "smooth",
            Command::Verify => "verify",
        }
    }

    pub fn stochastic(self) -> bool {
        matches!(self, Command::Sample | Command::Smooth)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Optional; must match the command given on the command line.
    pub command: Option<Command>,
    pub space: Option<Arc<StateSpace>>,
    pub target: Option<TargetSpec>,
    pub proposal: Option<mh_ldp::ProposalSpec>,
    pub tolerances: Option<RateOptions>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub kernel: Option<KernelBlock>,
    pub rate: Option<RateBlock>,
    pub legendre: Option<LegendreBlock>,
    pub sample: Option<SampleBlock>,
    pub laplace: Option<LaplaceBlock>,
    pub smooth: Option<SmoothBlock>,
    pub verify: Option<VerifyBlock>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelBlock {}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateBlock {
    /// The measure whose rate is computed; normalized on load.
    pub nu: TargetSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LegendreBlock {
    pub f: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleBlock {
    #[serde(default)]
    pub x0: usize,
    #[serde(default = "sample_n")]
    pub n: usize,
    pub ball: Option<BallBlock>,
}

fn sample_n() -> usize {
    Defaults::SAMPLE_N
}

impl Default for SampleBlock {
    fn default() -> Self {
        SampleBlock { x0: 0, n: Defaults::SAMPLE_N, ball: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallBlock {
    pub nu: TargetSpec,
    pub delta: f64,
    #[serde(default = "ball_reps")]
    pub reps: usize,
    #[serde(default = "tv")]
    pub metric: Metric,
}

fn ball_reps() -> usize {
    Defaults::BALL_REPS
}

fn tv() -> Metric {
    Metric::Tv
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaplaceBlock {
    pub f: Vec<f64>,
    #[serde(default = "Defaults::laplace_ns")]
    pub ns: Vec<usize>,
    #[serde(default)]
    pub x0: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothBlock {
    /// `(position, mass)` pairs of the singular measure.
    pub atoms: Vec<(f64, f64)>,
    #[serde(default = "Defaults::smoothing_ns")]
    pub ns: Vec<usize>,
    #[serde(default = "limsup_tol")]
    pub limsup_tol: f64,
}

fn limsup_tol() -> f64 {
    Defaults::LIMSUP_TOL
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyBlock {
    #[serde(default = "suite")]
    pub suite: String,
    #[serde(default)]
    pub overrides: VerifyConfig,
}

fn suite() -> String {
    Defaults::SUITE.to_string()
}

impl Default for VerifyBlock {
    fn default() -> Self {
        VerifyBlock { suite: suite(), overrides: VerifyConfig::default() }
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// The kernel spec, when the scenario defines one completely.
    pub fn kernel_spec(&self) -> Result<Option<KernelSpec>, CliError> {
        match (&self.space, &self.target, &self.proposal) {
            (Some(space), Some(target), Some(proposal)) => Ok(Some(KernelSpec {
                space: space.clone(),
                target: target.clone(),
                proposal: proposal.clone(),
            })),
            (None, None, None) => Ok(None),
            _ => Err(CliError::Config("space, target and proposal must be given together".into())),
        }
    }

    pub fn require_kernel(&self) -> Result<KernelSpec, CliError> {
        self.kernel_spec()?
            .ok_or_else(|| CliError::Config("this command needs space, target and proposal".into()))
    }

    /// Missing blocks are an error unless the command has usable defaults.
    pub fn block<T: Clone>(block: &Option<T>, name: &str) -> Result<T, CliError> {
        block.clone().ok_or_else(|| CliError::Config(format!("missing \"{name}\" block")))
    }
}
