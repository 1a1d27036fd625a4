use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cepshed::controller::Controller;
use cepshed::engine::{run_simulation, CostModel, SimOptions};
use cepshed::harness::{
    bench_csv, run_experiment, scalability_bench, ExperimentOptions, Strategy, WorkloadMode, WorkloadSpec,
};
use cepshed::lp::{build_model, grid_oracle, plan, Objective};
use cepshed::model::{load_topology, validate, Topology};
use cepshed::selectivity::predict_network;
use cepshed::shedding::{feasible_ptime, ShedderConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "cepshed",
    version,
    about = "Load shedding for distributed CEP operator graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a topology (and optionally a workload) for errors.
    Validate {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        workload: Option<PathBuf>,
    },
    /// Run the simulator with a fixed shedding configuration.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Shedder configuration as JSON; none means no shedding.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Cost::Deterministic)]
        cost: Cost,
    },
    /// Run an experiment under a shedding strategy against an oracle run.
    Experiment {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = StrategyArg::Global)]
        strategy: StrategyArg,
        #[arg(long)]
        bottleneck: Option<String>,
        #[arg(long, default_value_t = 0.10)]
        ptime_band: f64,
        #[arg(long, default_value_t = 0.05)]
        update_threshold: f64,
        #[arg(long, default_value_t = 1000)]
        monitor_window: usize,
        /// Also write the LP for the predicted load to lp_debug.lp.
        #[arg(long)]
        lp_debug: bool,
    },
    /// Time the planner on synthetic bottleneck LPs.
    BenchLp {
        #[arg(long, default_value_t = 100)]
        types: usize,
        #[arg(long, default_value_t = 10)]
        queries: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,1.0")]
        shares: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the LP optimum with a grid search at the bottleneck.
    OracleGrid {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        workload: Option<PathBuf>,
        #[arg(long)]
        bottleneck: Option<String>,
        #[arg(long, value_enum, default_value_t = StrategyArg::Global)]
        objective: StrategyArg,
        #[arg(long, default_value_t = 0.02)]
        step: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    topology: PathBuf,
    /// Workload TOML; balanced synthetic at the topology's rates when absent.
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    duration_ms: Option<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    None,
    Local,
    Global,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::None => Strategy::None,
            StrategyArg::Local => Strategy::Local,
            StrategyArg::Global => Strategy::Global,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Cost {
    Deterministic,
    Exponential,
    Zero,
}

impl From<Cost> for CostModel {
    fn from(c: Cost) -> Self {
        match c {
            Cost::Deterministic => CostModel::Deterministic,
            Cost::Exponential => CostModel::Exponential,
            Cost::Zero => CostModel::Zero,
        }
    }
}

fn load(topology: &Path, workload: Option<&Path>) -> Result<(Topology, WorkloadSpec)> {
    let t = load_topology(topology).with_context(|| format!("loading {}", topology.display()))?;
    let problems = validate(&t);
    if !problems.is_empty() {
        for v in &problems {
            eprintln!("{v}");
        }
        bail!("{} has {} problem(s)", topology.display(), problems.len());
    }
    let w = match workload {
        Some(p) => WorkloadSpec::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => WorkloadSpec::new(WorkloadMode::BalancedSynthetic),
    };
    Ok((t, w))
}

fn load_run(run: &RunArgs) -> Result<(Topology, WorkloadSpec)> {
    let (t, mut w) = load(&run.topology, run.workload.as_deref())?;
    if let Some(s) = run.seed {
        w.seed = s;
    }
    if let Some(d) = run.duration_ms {
        w.duration_ms = d;
    }
    fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    Ok((t, w))
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn pick_bottleneck(t: &Topology, name: Option<&str>) -> Result<(String, f64)> {
    let op = match name {
        Some(n) => t.operator(n).with_context(|| format!("no operator `{n}`"))?,
        None => t
            .bounded_operators()
            .next()
            .context("no operator has a latency bound")?,
    };
    let bound = op
        .latency_bound_ms
        .with_context(|| format!("`{}` has no latency bound", op.id))?;
    Ok((op.id.to_string(), bound))
}

/// Bottleneck model for the rates the workload starts with.
fn predicted_model(
    t: &Topology,
    w: &WorkloadSpec,
    bottleneck: &str,
    bound_ms: f64,
) -> Result<cepshed::lp::BottleneckModel> {
    let rates = w.base_rates(t)?;
    let snapshot = predict_network(t, &rates, &ShedderConfig::new())?.snapshot(t, &rates);
    let lambda = snapshot
        .operator(bottleneck)
        .context("bottleneck missing from snapshot")?
        .lambda();
    let p_star = feasible_ptime(bound_ms / 1000.0, lambda)?;
    Ok(build_model(t, &snapshot, bottleneck, p_star)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { topology, workload } => {
            let (t, w) = load(&topology, workload.as_deref())?;
            w.validate()?;
            if w.mode != WorkloadMode::Trace {
                w.base_rates(&t)?;
            }
            println!(
                "ok: {} sources, {} operators, {} sinks",
                t.sources.len(),
                t.operators.len(),
                t.sinks.len()
            );
        }
        Command::Simulate { run, config, cost } => {
            let (t, w) = load_run(&run)?;
            let cfg = match config {
                Some(p) => ShedderConfig::from_json(&fs::read_to_string(&p).with_context(|| p.display().to_string())?)?,
                None => ShedderConfig::new(),
            };
            let prepared = w.prepare(&t)?;
            let opts = SimOptions {
                horizon_ms: w.duration_ms,
                seed: w.seed,
                cost: cost.into(),
                ..SimOptions::default()
            };
            let report = run_simulation(&t, prepared.arrivals, cfg, opts)?;
            write(&run.out, "report.json", &serde_json::to_string_pretty(&report)?)?;
            write(&run.out, "timeseries.csv", &report.timeseries_csv()?)?;
            if let Some(trace) = prepared.trace {
                write(&run.out, "mapping.json", &trace.mapping_json())?;
            }
            println!("sinks: {}", serde_json::to_string(&report.sinks)?);
        }
        Command::Experiment {
            run,
            strategy,
            bottleneck,
            ptime_band,
            update_threshold,
            monitor_window,
            lp_debug,
        } => {
            let (t, w) = load_run(&run)?;
            let (b, bound_ms) = pick_bottleneck(&t, bottleneck.as_deref())?;
            let mut opts = ExperimentOptions::new(strategy.into());
            opts.bottleneck = Some(b.as_str().into());
            opts.bound_ms = Some(bound_ms);
            opts.ptime_band = ptime_band;
            opts.update_threshold = update_threshold;
            opts.monitor_window = monitor_window;
            let result = run_experiment(&t, &w, &opts)?;
            write(&run.out, "report.json", &result.report.to_json())?;
            write(&run.out, "timeseries.csv", &result.simulation.timeseries_csv()?)?;
            write(
                &run.out,
                "decisions.jsonl",
                &Controller::decisions_jsonl(&result.decisions),
            )?;
            if let Some(trace) = &result.trace {
                write(&run.out, "mapping.json", &trace.mapping_json())?;
            }
            if lp_debug {
                if w.mode == WorkloadMode::Trace {
                    log::warn!("no predicted LP for trace workloads; skipping lp_debug.lp");
                } else {
                    let model = predicted_model(&t, &w, &b, bound_ms)?;
                    let objective = strategy_objective(strategy);
                    write(
                        &run.out,
                        "lp_debug.lp",
                        &plan(&model, objective)?.problem.to_lp_format(),
                    )?;
                }
            }
            let r = &result.report;
            println!(
                "recall {:.4}, deviation {:.3} s, compliance {:.3}, recomputes {}",
                r.recall, r.deviation_seconds, r.compliance, r.solver.recomputes
            );
        }
        Command::BenchLp {
            types,
            queries,
            shares,
            reps,
            seed,
            out,
        } => {
            let rows = shares
                .iter()
                .map(|&s| scalability_bench(types, queries, s, reps, seed))
                .collect::<Result<Vec<_>, _>>()?;
            let csv = bench_csv(&rows)?;
            match out {
                Some(p) => fs::write(&p, csv).with_context(|| p.display().to_string())?,
                None => print!("{csv}"),
            }
        }
        Command::OracleGrid {
            topology,
            workload,
            bottleneck,
            objective,
            step,
        } => {
            if !(step > 0.0 && step <= 1.0) {
                bail!("step must be in (0, 1]");
            }
            let (t, w) = load(&topology, workload.as_deref())?;
            let (b, bound_ms) = pick_bottleneck(&t, bottleneck.as_deref())?;
            let model = predicted_model(&t, &w, &b, bound_ms)?;
            let objective = strategy_objective(objective);
            let lp = plan(&model, objective)?;
            let grid = grid_oracle(&model, objective, step);
            let value = |x: &[f64]| {
                let e = model.evaluate(x);
                match objective {
                    Objective::Global => e.global,
                    Objective::Local => e.local,
                }
            };
            let pairs: Vec<String> = model.pairs.iter().map(|p| format!("{}/{}", p.pattern, p.ty)).collect();
            let out = json!({
                "bottleneck": b,
                "objective": objective,
                "pairs": pairs,
                "lp": { "value": value(&lp.x), "x": lp.x },
                "grid": { "value": grid.value, "x": grid.x, "points": grid.points, "step": step },
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
    }
    Ok(())
}

fn strategy_objective(s: StrategyArg) -> Objective {
    Strategy::from(s).objective().unwrap_or(Objective::Global)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
