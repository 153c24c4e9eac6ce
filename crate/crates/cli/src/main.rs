use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kam_cli::config::{parse_config, RunConfig};
use kam_cli::pipeline::{
    cohomology_selftest, execute, sweep, sweep_csv, verify_saved, write_outputs,
};
use kam_cli::CliError;
use kam_core::cohomology::MEAN_TOLERANCE;
use kam_core::diophantine::{default_tau, worst_resonance};
use serde_json::json;

/// Constructive KAM iteration: conjugate a near-integrable Hamiltonian to
/// Kolmogorov normal form and verify the result.
#[derive(Parser)]
#[command(name = "kam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write report.json, iterations.csv and friends.
    Solve(SolveArgs),
    /// Scan `|omega.k| |k|^tau` for the worst resonance.
    Diophantine {
        /// Comma-separated frequencies.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        omega: Vec<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 50)]
        kmax: u32,
    },
    /// Solve the cohomological equation for random right-hand sides.
    CohomologySelftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Re-check a saved run with the pointwise oracles.
    Verify {
        #[arg(long = "run")]
        report: PathBuf,
    },
    /// Run one configuration over a range of perturbation sizes.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Stopping tolerance on eps_n.
    #[arg(long)]
    tol: Option<f64>,
    /// Seed for the random sample points of the symplecticity check.
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut config = parse_config(&self.config)?;
        if let Some(n) = self.max_steps {
            config.schedule.max_steps = n;
        }
        if let Some(tol) = self.tol {
            config.schedule.stop_tol = Some(tol);
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Explicit list of eps_0 values.
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
    /// Log-spaced range `--from A --to B --points N` (used without `--eps`).
    #[arg(long, default_value_t = 1e-6)]
    from: f64,
    #[arg(long, default_value_t = 1e-1)]
    to: f64,
    #[arg(long, default_value_t = 11)]
    points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn log_space(from: f64, to: f64, points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![from];
    }
    let (a, b) = (from.ln(), to.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Solve(args) => {
            let config = args.overrides.load()?;
            let out = args
                .out
                .or_else(|| config.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("kam-out"));
            let result = execute(&config, true)?;
            write_outputs(&out, &result)?;
            let r = &result.report;
            println!(
                "{}",
                json!({
                    "converged": r.converged,
                    "passed": r.passed,
                    "steps": r.steps,
                    "final_epsilon": r.final_epsilon,
                    "verification": r.verification,
                    "out": out,
                })
            );
            Ok(result.exit_code())
        }
        Command::Diophantine { omega, tau, kmax } => {
            let tau = tau.unwrap_or_else(|| default_tau(omega.len()));
            let scan = worst_resonance(&omega, tau, kmax)?;
            println!(
                "{}",
                json!({ "k_star": scan.k_star, "c_hat": scan.c_hat, "tau": tau, "kmax": kmax, "resonant": scan.c_hat == 0.0 })
            );
            Ok(0)
        }
        Command::CohomologySelftest { seed, count } => {
            let (cases, worst) = cohomology_selftest(seed, count)?;
            let pass = worst < MEAN_TOLERANCE;
            println!(
                "{}",
                json!({ "cases": cases, "max_relative_residual": worst, "pass": pass })
            );
            Ok(if pass { 0 } else { 1 })
        }
        Command::Verify { report } => {
            let v = verify_saved(&report)?;
            println!(
                "{}",
                json!({
                    "freq_err": v.freq_err,
                    "angle_dep_err": v.angle_dep_err,
                    "flow_dist": v.flow_dist,
                    "rotation_err": v.rotation_err,
                    "sympl_defect": v.sympl_defect,
                    "passed": v.passed,
                })
            );
            Ok(if v.passed { 0 } else { 1 })
        }
        Command::Sweep(args) => {
            let config = args.overrides.load()?;
            let eps = if args.eps.is_empty() {
                log_space(args.from, args.to, args.points)
            } else {
                args.eps
            };
            let summary = sweep(&config, &eps)?;
            if let Some(out) = &args.out {
                std::fs::create_dir_all(out).map_err(|source| CliError::Io {
                    path: out.clone(),
                    source,
                })?;
                let path = out.join("sweep.csv");
                std::fs::write(&path, sweep_csv(&summary))
                    .map_err(|source| CliError::Io { path, source })?;
            }
            println!("{}", serde_json::to_string(&summary)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(2)
        }
    }
}
