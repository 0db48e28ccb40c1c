//! Experiment runner and inspection CLI for the solver library.
//!
//! `run` executes a configured experiment across grid sizes and writes
//! `results.csv` plus `report.json`; the exit code is 0 exactly when every
//! asserted tolerance passes. The remaining subcommands are direct drivers
//! for the individual solvers.

mod config;
mod experiments;
mod instances;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use fbsvie::bsvie::{picard_solve, BetaPolicy, PicardConfig};
use fbsvie::coefficients::kernel_const;
use fbsvie::control::check_duality;
use fbsvie::finance::{
    optimal_portfolio_linear, optimal_portfolio_meanvariance, risk_value, AdjointCase,
    LinearPortfolio, MarketSpec,
};
use fbsvie::lattice::backend::BackendRegistry;
use fbsvie::lattice::{ScenarioTree, TimeGrid};
use fbsvie::lq::{lq_mp_violation, solve_lq, stationarity_residual};
use fbsvie::presets::PresetRegistry;
use fbsvie::process::{AdaptedProcess, TerminalFamily};

use config::ConfigFile;
use experiments::{ExperimentRegistry, RunContext};
use output::{emit, write_atomic};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Solver(fbsvie::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Solver(e) => write!(f, "solver error: {e}"),
        }
    }
}

impl From<fbsvie::Error> for CliError {
    fn from(e: fbsvie::Error) -> Self {
        CliError::Solver(e)
    }
}

#[derive(Parser)]
#[command(
    name = "fbsvie",
    about = "Scenario-tree experiments for forward-backward stochastic Volterra systems",
    version
)]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Conditional-expectation backend: exact-tree | regression-mc.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Grid sizes, comma separated (overrides the config).
    #[arg(long = "N", global = true, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DualityCase {
    Zero,
    Generic,
}

#[derive(Clone, Copy, ValueEnum)]
enum FinanceCaseArg {
    Linear,
    Meanvar,
    Adjoint1,
    Adjoint2,
    Adjoint3,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named in the config file.
    Run,
    /// Run a named experiment across grid sizes.
    Convergence {
        #[arg(long)]
        problem: String,
    },
    /// Solve a named backward preset and emit the value profile + Picard report.
    SolveBsvie {
        #[arg(long, default_value = "mixed_bsvie")]
        preset: String,
        /// Fixed contraction weight (default: automatic ladder).
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Evaluate both sides of the dual pairing identity.
    CheckDuality {
        #[arg(long, value_enum, default_value = "zero")]
        case: DualityCase,
    },
    /// Solve the default backward LQ problem and report the worst
    /// maximum-principle violation.
    CheckMp,
    /// Solve the default backward LQ problem; emit (t, E u, E Y, E P) and J.
    LqSolve,
    /// Market application cases.
    FinanceCase {
        #[arg(long, value_enum)]
        case: FinanceCaseArg,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta_vol: Option<f64>,
        #[arg(long)]
        x0: Option<f64>,
    },
    /// Dump the scenario tree as CSV (level, node_id, W_value).
    DumpTree,
    /// List registered experiments, presets and backends.
    List,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more assertions failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
    }
}

/// Build the run context from the config file (when given) plus CLI
/// overrides, validating before anything is written.
fn context(cli: &Cli, default_sizes: &[usize]) -> Result<(RunContext, PathBuf, ConfigFile), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile {
            experiment: config::ExperimentSection {
                problem: String::new(),
                grid_sizes: default_sizes.to_vec(),
                backend: "exact-tree".into(),
                seed: 42,
                out_dir: PathBuf::from("results"),
                horizon: 1.0,
            },
            backend: Default::default(),
            tolerances: Default::default(),
            market: Default::default(),
        },
    };
    if let Some(n) = &cli.n {
        cfg.experiment.grid_sizes = n.clone();
    }
    if let Some(b) = &cli.backend {
        cfg.experiment.backend = b.clone();
    }
    if let Some(out) = &cli.out {
        cfg.experiment.out_dir = out.clone();
    }
    cfg.validate()?;
    let out_dir = cfg.experiment.out_dir.clone();
    Ok((RunContext::from_config(&cfg), out_dir, cfg))
}

fn single_n(ctx: &RunContext) -> usize {
    *ctx.grid_sizes.last().expect("validated nonempty")
}

fn dispatch(cli: &Cli) -> Result<bool, CliError> {
    match &cli.cmd {
        Command::Run => {
            let cfg_path = cli
                .config
                .as_ref()
                .ok_or_else(|| CliError::Config("`run` needs --config".into()))?;
            let cfg = ConfigFile::load(cfg_path)?;
            let (ctx, out_dir, _) = context(cli, &cfg.experiment.grid_sizes)?;
            run_experiment(&cfg.experiment.problem, &ctx, &out_dir)
        }
        Command::Convergence { problem } => {
            let (ctx, out_dir, _) = context(cli, &[4, 8, 16])?;
            run_experiment(problem, &ctx, &out_dir)
        }
        Command::SolveBsvie { preset, beta } => {
            let (ctx, out_dir, _) = context(cli, &[8])?;
            let n = single_n(&ctx);
            let lat = ctx.lattice(n)?;
            let spec = PresetRegistry::builtin().build(preset, &lat)?;
            let cfg = PicardConfig {
                beta: match beta {
                    Some(b) => BetaPolicy::Fixed(*b),
                    None => BetaPolicy::Auto,
                },
                ..Default::default()
            };
            let (sol, report) = picard_solve(&spec, &cfg)?;
            let means: Vec<f64> = (0..=n).map(|i| sol.y.expectation(i)).collect();
            let vars: Vec<f64> = (0..=n).map(|i| sol.y.variance(i)).collect();
            let doc = json!({
                "preset": preset,
                "backend": ctx.backend,
                "N": n,
                "y_mean": means,
                "y_variance": vars,
                "picard": {
                    "beta": report.beta,
                    "iterations": report.iterations,
                    "deltas": report.deltas,
                    "ratios": report.ratios,
                    "converged": report.converged,
                },
            });
            let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
            write_atomic(&out_dir.join("solve-bsvie.json"), text.as_bytes())?;
            println!("{text}");
            Ok(report.converged)
        }
        Command::CheckDuality { case } => {
            let (ctx, out_dir, _) = context(cli, &[8])?;
            let n = single_n(&ctx);
            let lat = ctx.lattice(n)?;
            let (a1, a2, phi, psi) = match case {
                DualityCase::Zero => (
                    kernel_const(0.0),
                    kernel_const(0.0),
                    AdaptedProcess::wiener(lat.clone()).map(|w| 1.0 + w),
                    TerminalFamily::uniform(lat.clone(), lat.wiener(n))?,
                ),
                DualityCase::Generic => (
                    kernel_const(1.0),
                    kernel_const(0.5),
                    AdaptedProcess::wiener(lat.clone()).map(|w| 1.0 + w * w),
                    TerminalFamily::uniform(
                        lat.clone(),
                        lat.wiener(n).iter().map(|w| w * w + w).collect(),
                    )?,
                ),
            };
            let rep = check_duality(&lat, &a1, &a2, &phi, &psi)?;
            let doc = json!({"lhs": rep.lhs, "rhs": rep.rhs, "gap": rep.gap});
            let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
            write_atomic(&out_dir.join("check-duality.json"), text.as_bytes())?;
            println!("{text}");
            Ok(true)
        }
        Command::CheckMp => {
            let (ctx, out_dir, _) = context(cli, &[6])?;
            let n = single_n(&ctx);
            let lat = ctx.lattice(n)?;
            let spec = instances::lq_default(&lat);
            let sol = solve_lq(&spec)?;
            let samples = fbsvie::control::default_mp_samples(spec.control_set);
            let v = lq_mp_violation(&spec, &sol, &samples)?;
            let doc = json!({
                "worst_violation": v.worst,
                "argnode": {"level": v.level, "node": v.node},
            });
            let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
            write_atomic(&out_dir.join("check-mp.json"), text.as_bytes())?;
            println!("{text}");
            Ok(v.worst <= 1e-8)
        }
        Command::LqSolve => {
            let (ctx, out_dir, _) = context(cli, &[6])?;
            let n = single_n(&ctx);
            let lat = ctx.lattice(n)?;
            let grid = lat.grid();
            let spec = instances::lq_default(&lat);
            let sol = solve_lq(&spec)?;
            let stat = stationarity_residual(&spec, &sol)?;
            let mut csv = String::from("t,mean_control,mean_state,mean_multiplier\n");
            for k in 0..=n {
                csv.push_str(&format!(
                    "{:.12e},{:.12e},{:.12e},{:.12e}\n",
                    grid.t(k),
                    sol.u.expectation(k),
                    sol.state.y.expectation(k),
                    sol.p.expectation(k),
                ));
            }
            write_atomic(&out_dir.join("lq.csv"), csv.as_bytes())?;
            let doc = json!({"cost": sol.cost, "sweeps": sol.sweeps, "stationarity": stat});
            let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
            write_atomic(&out_dir.join("lq.json"), text.as_bytes())?;
            println!("{text}");
            Ok(stat <= 1e-8)
        }
        Command::FinanceCase {
            case,
            gamma,
            rho,
            alpha,
            beta_vol,
            x0,
        } => {
            let (mut ctx, out_dir, _) = context(cli, &[8])?;
            if let Some(g) = gamma {
                ctx.market.gamma = *g;
            }
            if let Some(r) = rho {
                ctx.market.rho = *r;
            }
            if let Some(a) = alpha {
                ctx.market.alpha = *a;
            }
            if let Some(b) = beta_vol {
                ctx.market.beta_vol = *b;
            }
            if let Some(x) = x0 {
                ctx.market.x0 = *x;
            }
            finance_case(*case, &ctx, &out_dir)
        }
        Command::DumpTree => {
            let (ctx, out_dir, _) = context(cli, &[4])?;
            let n = single_n(&ctx);
            let grid = TimeGrid::new(ctx.horizon, n)?;
            let tree = ScenarioTree::new(grid)?;
            let mut buf = Vec::new();
            tree.dump_csv(&mut buf)
                .map_err(|e| CliError::Io(e.to_string()))?;
            write_atomic(&out_dir.join("tree.csv"), &buf)?;
            println!("wrote {}", out_dir.join("tree.csv").display());
            Ok(true)
        }
        Command::List => {
            println!("experiments:");
            for (key, describe) in ExperimentRegistry::builtin().names() {
                println!("  {key:28} {describe}");
            }
            println!("backward presets:");
            for name in PresetRegistry::builtin().names() {
                println!("  {name}");
            }
            println!("backends:");
            let reg = BackendRegistry::builtin();
            for name in reg.names() {
                println!("  {name}");
            }
            Ok(true)
        }
    }
}

fn run_experiment(problem: &str, ctx: &RunContext, out_dir: &PathBuf) -> Result<bool, CliError> {
    let registry = ExperimentRegistry::builtin();
    let output = registry.run(problem, ctx)?;
    emit(out_dir, problem, &output)?;
    for a in &output.assertions {
        let verdict = if a.pass { "pass" } else { "FAIL" };
        println!(
            "{verdict}  {name}: value {value:.6e}, tolerance {tol:.6e}",
            name = a.name,
            value = a.value,
            tol = a.tolerance
        );
    }
    println!(
        "{} records, {} assertions -> {}",
        output.records.len(),
        output.assertions.len(),
        out_dir.display()
    );
    Ok(output.all_pass())
}

fn finance_case(
    case: FinanceCaseArg,
    ctx: &RunContext,
    out_dir: &PathBuf,
) -> Result<bool, CliError> {
    let n = single_n(ctx);
    let lat = ctx.lattice(n)?;
    let grid = lat.grid();
    let m = ctx.market;
    let write_profile = |u: &AdaptedProcess, x: &AdaptedProcess| -> Result<(), CliError> {
        let mut csv = String::from("t,mean_portfolio,mean_wealth\n");
        for k in 0..=n {
            csv.push_str(&format!(
                "{:.12e},{:.12e},{:.12e}\n",
                grid.t(k),
                u.expectation(k),
                x.expectation(k),
            ));
        }
        write_atomic(&out_dir.join("finance.csv"), csv.as_bytes())
    };
    match case {
        FinanceCaseArg::Linear => {
            // linear utility needs α ≡ ρ for feasibility
            let market = MarketSpec::constant(lat.clone(), m.rho, m.alpha, m.beta_vol, m.x0)?;
            let risk = fbsvie::finance::RiskSpec::plain(
                lat.clone(),
                m.risk_rate,
                kernel_const(0.0),
                kernel_const(m.k2),
                fbsvie::coefficients::scalar_fn(|x| x),
                fbsvie::coefficients::scalar_fn(|_| 1.0),
            );
            match optimal_portfolio_linear(&risk, &market)? {
                LinearPortfolio::Optimal { u, risk_value: y0 } => {
                    let x = fbsvie::finance::simulate_wealth(&market, &u)?;
                    write_profile(&u, &x)?;
                    let doc = json!({"case": "linear", "initial_risk": y0});
                    let text =
                        serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
                    write_atomic(&out_dir.join("finance.json"), text.as_bytes())?;
                    println!("{text}");
                    Ok(true)
                }
                LinearPortfolio::Infeasible { residual } => {
                    let doc = json!({"case": "linear", "infeasible": true, "residual": residual});
                    let text =
                        serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
                    write_atomic(&out_dir.join("finance.json"), text.as_bytes())?;
                    println!("{text}");
                    Ok(true)
                }
            }
        }
        FinanceCaseArg::Meanvar => {
            let market = MarketSpec::constant(lat.clone(), m.rho, m.alpha, m.beta_vol, m.x0)?;
            let risk = instances::meanvar_risk(&lat, m.gamma);
            let sol = optimal_portfolio_meanvariance(&market, &risk, m.gamma)?;
            write_profile(&sol.u, &sol.x)?;
            let (y0, _, _) = risk_value(&risk, &market, &sol.u)?;
            let doc = json!({
                "case": "meanvar",
                "gamma": m.gamma,
                "initial_risk": y0,
                "stationarity_residual": sol.stationarity,
                "iterations": sol.iterations,
            });
            let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
            write_atomic(&out_dir.join("finance.json"), text.as_bytes())?;
            println!("{text}");
            Ok(sol.stationarity <= 1e-6)
        }
        FinanceCaseArg::Adjoint1 | FinanceCaseArg::Adjoint2 | FinanceCaseArg::Adjoint3 => {
            let adj_case = match case {
                FinanceCaseArg::Adjoint1 => AdjointCase::ZeroInterest,
                FinanceCaseArg::Adjoint2 => AdjointCase::ZeroRiskRate,
                _ => AdjointCase::BothNonzero,
            };
            let (market, risk) = instances::adjoint_case_instance(&lat, adj_case, &ctx.market)?;
            let u = AdaptedProcess::constant(lat.clone(), 0.25);
            let x = fbsvie::finance::simulate_wealth(&market, &u)?;
            let solver = fbsvie::finance::solve_market_adjoint(&risk, &market, &x)?;
            let closed = fbsvie::finance::closed_form_adjoints(adj_case, &risk, &market, &x)?;
            let mut worst = 0.0f64;
            for k in 0..n {
                for node in 0..lat.width(k) {
                    worst = worst.max((solver.p.values(k)[node] - closed.p.values(k)[node]).abs());
                    worst = worst.max((solver.q.values(k)[node] - closed.q.values(k)[node]).abs());
                }
            }
            write_profile(&u, &x)?;
            let doc = json!({
                "case": format!("{adj_case:?}"),
                "sup_error_vs_closed_form": worst,
                "N": n,
            });
            let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
            write_atomic(&out_dir.join("finance.json"), text.as_bytes())?;
            println!("{text}");
            Ok(true)
        }
    }
}

