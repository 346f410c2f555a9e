use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crfv::config::{load_config, RunConfig};
use crfv::run::{self, RunFailure};

/// Mixed Crouzeix-Raviart / upwind finite volume solver with certificates.
///
/// Exit status: 0 when every certificate passed, 1 when the run finished with
/// failed certificates, 2 when the solver (or the configuration) failed.
#[derive(Parser)]
#[command(name = "crfv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured problem and write the ledgers.
    Solve {
        config: PathBuf,
        /// Output directory (default: `output_dir` from the config or CRFV_OUTPUT_DIR).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate the algebraic identity suite on the configured mesh.
    Check {
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Refinement study of a manufactured case.
    Convergence {
        config: PathBuf,
        /// Comma-separated cells per edge (e.g. `3,4,6,8`), or a single count
        /// taking that many levels from the config's `levels`.
        #[arg(long)]
        levels: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load(path: &Path) -> Result<RunConfig, RunFailure> {
    let text = fs::read_to_string(path).map_err(|e| RunFailure::Other(format!("{}: {e}", path.display())))?;
    let cfg = load_config(&text)?;
    for w in &cfg.warnings {
        log::warn!("{w}");
    }
    Ok(cfg)
}

fn parse_levels(arg: Option<&str>, cfg: &RunConfig) -> Result<Vec<usize>, RunFailure> {
    let Some(arg) = arg else { return Ok(cfg.levels.clone()) };
    let parts: Vec<usize> = arg
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| RunFailure::Other(format!("bad --levels `{arg}`")))?;
    if parts.contains(&0) || parts.is_empty() {
        return Err(RunFailure::Other("levels must be positive".into()));
    }
    if !arg.contains(',') && parts[0] <= cfg.levels.len() {
        return Ok(cfg.levels[..parts[0]].to_vec());
    }
    Ok(parts)
}

fn execute(cli: Cli) -> Result<i32, RunFailure> {
    match cli.command {
        Command::Solve { config, output } => {
            let cfg = load(&config)?;
            let dir = output.unwrap_or_else(|| cfg.resolved_output_dir());
            let out = run::solve(&cfg, Some(&dir))?;
            let c = &out.certificates;
            println!("steps completed      {}", out.trajectory.reports.len());
            println!("positivity           {} (min rho over iterates {:.6e})", pass(c.positivity), c.min_rho);
            println!("mass balance         {} (max step residual {:.3e}, cumulative {:.3e})", pass(c.mass), c.max_mass_residual, c.cumulative_mass_residual);
            println!("energy inequality    {} (min relative slack {:.3e})", pass(c.energy), c.min_slack);
            if let Some(m) = c.energy_monotone {
                println!("energy nonincreasing {} (max relative increase {:.3e})", pass(m), c.max_energy_increase);
            }
            let t = out.report.targets;
            println!(
                "a-priori bounds      {} (rho {:.4e}, momentum {:.4e}, grad v {:.4e})",
                pass(out.estimates_bounded),
                t.rho_linf_lgamma,
                t.momentum_linf_l2,
                t.grad_v_l2l2
            );
            for m in &c.messages {
                println!("  {m}");
            }
            if let Some(e) = &out.failure {
                println!("solver failure: {e}");
            }
            println!("ledgers written to {}", dir.display());
            Ok(out.exit_code())
        }
        Command::Check { config, trials } => {
            let cfg = load(&config)?;
            let out = run::check(&cfg, trials)?;
            for c in &out.identities {
                println!("{:<30} {} worst {:.3e} (tolerance {:.0e}, {} trials)", c.name, pass(c.passed()), c.worst, c.tolerance, c.trials);
            }
            println!("{:<30} {} (min second difference {:.3e})", "pressure potential convexity", pass(out.convexity_ok), out.convexity_min);
            Ok(if out.passed() { 0 } else { 1 })
        }
        Command::Convergence { config, levels, output } => {
            let cfg = load(&config)?;
            let levels = parse_levels(levels.as_deref(), &cfg)?;
            let dir = output.unwrap_or_else(|| cfg.resolved_output_dir());
            let report = run::convergence(&cfg, &levels, Some(&dir))?;
            print!("{}", report.table());
            let exact = cfg.data != crfv::config::DataSource::Channel;
            if report.failure.is_some() {
                return Ok(2);
            }
            let ok = report.passed(exact);
            println!("{}", if ok { "errors decay: PASS" } else { "errors decay: FAIL" });
            Ok(if ok { 0 } else { 1 })
        }
    }
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
