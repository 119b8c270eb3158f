use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rso_bench::verify::{
    verify_bound, verify_gradcheck, verify_projections, verify_sandwich, BoundArgs, GradcheckArgs, ProjectionsArgs,
    SandwichArgs, VerifyReport,
};
use rso_bench::{memory, prepare_out_dir, sweep, train, CliError, ExperimentConfig, Exit, DEFAULT_OUT_DIR, OUT_DIR_ENV};
use rso_core::projection::ProjectionKind;

#[derive(Parser)]
#[command(name = "rso-bench", version, about = "Randomized subspace optimization: checks, training runs and cost reports")]
struct Cli {
    /// Directory for reports, traces and summaries.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = DEFAULT_OUT_DIR)]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a verification suite; writes verify-<check>.json.
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Train from a TOML experiment file; writes <name>.trace.csv and <name>.summary.json.
    Train { config: PathBuf },
    /// Analytic optimizer-state, activation and communication bytes as JSON on stdout.
    MemoryReport {
        #[arg(long)]
        arch: String,
        #[arg(long)]
        alg: String,
        #[arg(long, default_value_t = 128)]
        rank: u64,
        /// Bytes per stored state / activation entry.
        #[arg(long, default_value_t = 2)]
        element_bytes: usize,
        /// Bytes per communicated gradient entry.
        #[arg(long, default_value_t = 2)]
        comm_element_bytes: usize,
    },
    /// Run the seed × rank grid of an experiment file; writes one trace per cell and <name>.sweep.csv.
    Sweep {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Subcommand)]
enum VerifyCommand {
    /// Isometry and unbiasedness of sampled projections.
    Projections(ProjectionFlags),
    /// Analytic gradients against finite differences.
    Gradcheck(GradcheckFlags),
    /// Strong convexity and smoothness of the subproblem on random pairs.
    Sandwich(SandwichFlags),
    /// Seed-averaged gradient norms against the convergence bound.
    Bound(BoundFlags),
}

#[derive(Args)]
struct ProjectionFlags {
    /// Rows; with --r, checks one cell instead of the default grid.
    #[arg(long, requires = "r")]
    m: Option<usize>,
    #[arg(long, requires = "m")]
    r: Option<usize>,
    /// haar, coordinate or gaussian_approx; default: both exact kinds.
    #[arg(long)]
    dist: Option<ProjectionKind>,
    #[arg(long, default_value_t = 20000)]
    trials: usize,
    #[arg(long, default_value_t = 3)]
    isometry_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckFlags {
    /// transformer, tiny_lm, logistic or quadratic.
    #[arg(long, default_value = "transformer")]
    model: String,
    #[arg(long, default_value_t = 8)]
    s: usize,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    r: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable the causal attention mask.
    #[arg(long)]
    no_causal: bool,
}

#[derive(Args)]
struct SandwichFlags {
    /// quadratic or logistic.
    #[arg(long, default_value = "quadratic")]
    model: String,
    #[arg(long, default_value_t = 32)]
    m: usize,
    #[arg(long, default_value_t = 8)]
    r: usize,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    pairs: usize,
    /// Proximal coefficient; default 1/(2L̂).
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BoundFlags {
    #[arg(long, default_value_t = 32)]
    m: usize,
    #[arg(long, default_value_t = 8)]
    r: usize,
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Largest outer iteration count; checks 1, 2, 4, … up to it.
    #[arg(long = "K", default_value_t = 64)]
    k: usize,
    /// 0 for exact solves, otherwise certified gradient descent to this gap.
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    #[arg(long, default_value_t = 32)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    problem_seed: u64,
    /// Step budget per certified solve is ten times this.
    #[arg(long, default_value_t = 200)]
    inner_steps: usize,
}

fn finish_verify(report: VerifyReport, out_dir: &std::path::Path) -> Result<(), CliError> {
    let dir = prepare_out_dir(out_dir)?;
    let path = dir.join(format!("verify-{}.json", report.check));
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))?;
    println!("verify {}: {}", report.check, if report.pass { "pass" } else { "FAIL" });
    report.into_result().map(|_| ())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Verify(v) => {
            let report = match v {
                VerifyCommand::Projections(f) => verify_projections(&ProjectionsArgs {
                    cells: f.m.zip(f.r),
                    kinds: match f.dist {
                        Some(k) => vec![k],
                        None => vec![ProjectionKind::Haar, ProjectionKind::Coordinate],
                    },
                    trials: f.trials,
                    isometry_samples: f.isometry_samples,
                    seed: f.seed,
                })?,
                VerifyCommand::Gradcheck(f) => verify_gradcheck(&GradcheckArgs {
                    model: f.model,
                    s: f.s,
                    n: f.n,
                    r: f.r,
                    seed: f.seed,
                    causal: !f.no_causal,
                })?,
                VerifyCommand::Sandwich(f) => verify_sandwich(&SandwichArgs {
                    model: f.model,
                    m: f.m,
                    r: f.r,
                    n: f.n,
                    pairs: f.pairs,
                    eta: f.eta,
                    seed: f.seed,
                })?,
                VerifyCommand::Bound(f) => verify_bound(&BoundArgs {
                    m: f.m,
                    r: f.r,
                    n: f.n,
                    k: f.k,
                    eps: f.eps,
                    seeds: f.seeds,
                    problem_seed: f.problem_seed,
                    inner_steps: f.inner_steps,
                })?,
            };
            finish_verify(report, &cli.out_dir)
        }
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = prepare_out_dir(&cli.out_dir)?;
            let s = train::train(&cfg, &dir)?;
            println!(
                "{} {}: final loss {} after {} steps",
                s.name,
                s.algorithm,
                s.final_loss.map_or("-".into(), |f| format!("{f:.6}")),
                s.total_steps
            );
            Ok(())
        }
        Command::MemoryReport { arch, alg, rank, element_bytes, comm_element_bytes } => {
            let report = memory::memory_report(&arch, &alg, rank, element_bytes, comm_element_bytes)?;
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
        Command::Sweep { config, jobs } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = prepare_out_dir(&cli.out_dir)?;
            let cells = sweep::sweep(&cfg, &dir, jobs)?;
            println!("{}: {} cells", cfg.name, cells.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Exit::Usage } else { Exit::Pass };
            let _ = e.print();
            return ExitCode::from(code.code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(Exit::Pass.code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit.code())
        }
    }
}
