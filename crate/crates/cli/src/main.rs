//! `mh-ldp <command> --config path [--out dir] [--seed u64] [--tol float]`
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 invalid input,
//! 3 solver failure.

mod config;
mod error;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use config::{Command, Defaults, ScenarioConfig};
use error::CliError;
use output::{sha256_hex, Manifest, OutputDir, Versions};
use run::Effective;

#[derive(Parser)]
#[command(name = "mh-ldp", version, about = "Rate functions and large deviations of Metropolis-Hastings chains")]
struct Args {
    command: Command,
    /// Scenario JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the scenario's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sinkhorn marginal tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

fn init_threads() -> Result<usize, CliError> {
    if let Ok(v) = std::env::var("MH_LDP_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Config(format!("MH_LDP_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(rayon::current_num_threads())
}

fn load(args: &Args) -> Result<(ScenarioConfig, Vec<u8>), CliError> {
    let bytes = std::fs::read(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Config(e.to_string()))?;
    let cfg = ScenarioConfig::parse(text)?;
    if let Some(c) = cfg.command {
        if c != args.command {
            return Err(CliError::Config(format!(
                "config is for \"{}\" but \"{}\" was requested",
                c.name(),
                args.command.name()
            )));
        }
    }
    Ok((cfg, bytes))
}

fn execute(args: &Args, out: &mut Option<OutputDir>) -> Result<i32, CliError> {
    let start = Instant::now();
    let threads = init_threads()?;
    let (cfg, bytes) = load(args)?;
    let dir = args.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| Defaults::OUT_DIR.into());
    let dir = out.insert(OutputDir::create(&dir)?);
    let mut tolerances = cfg.tolerances.unwrap_or_else(Defaults::tolerances);
    if let Some(tol) = args.tol {
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(CliError::Config(format!("--tol must be positive, got {tol}")));
        }
        tolerances.tol = tol;
    }
    let eff = Effective { seed: args.seed.or(cfg.seed), tolerances };
    let code = run::run(args.command, &cfg, &eff, dir)?;
    let manifest = Manifest {
        command: args.command.name().to_string(),
        config_path: args.config.display().to_string(),
        config_sha256: sha256_hex(&bytes),
        seed: eff.seed,
        tol: eff.tolerances.tol,
        threads,
        versions: Versions { cli: env!("CARGO_PKG_VERSION"), core: mh_ldp::VERSION },
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        exit_code: code,
        files: dir.files().to_vec(),
    };
    dir.json("manifest.json", &manifest)?;
    Ok(code)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let mut out = None;
    let code = match execute(&args, &mut out) {
        Ok(code) => code,
        Err(e) => {
            let report = e.report(Some(args.command.name()));
            let json = serde_json::to_string_pretty(&report).unwrap_or_default();
            eprintln!("{json}");
            if let Some(dir) = out.as_mut() {
                let _ = dir.write("error.json", format!("{json}\n").into_bytes());
            }
            report.exit_code
        }
    };
    ExitCode::from(code as u8)
}
