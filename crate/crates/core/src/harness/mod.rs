//! Workloads, experiments and their metrics.

mod bench;
mod trace;
mod workload;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bench::{bench_csv, scalability_bench, BenchRow};
pub use trace::{fnv1a64, ingest_trace, synthetic_trace, type_mapping, Trace, TraceFile, BUNDLED_ROWS, BUNDLED_SEED};
pub use workload::{PhaseSpec, Prepared, TraceSpec, WorkloadMode, WorkloadSpec};

use crate::controller::{ConfigChange, Controller, ControllerError, ControllerOptions, Decision};
use crate::engine::{CostModel, EngineError, OperatorReport, SeriesRow, SimOptions, Simulation, SimulationReport};
use crate::lp::Objective;
use crate::model::{NodeId, Topology};
use crate::shedding::{feasible_ptime, ShedderConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(String),
    #[error("workload: {0}")]
    Workload(String),
    #[error("trace: {0}")]
    Trace(String),
    #[error("empty trace: {0}")]
    EmptyTrace(String),
    #[error("no bounded operator to act as bottleneck")]
    NoBottleneck,
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("bench: {0}")]
    Bench(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    None,
    Local,
    Global,
}

impl Strategy {
    pub fn objective(self) -> Option<Objective> {
        match self {
            Strategy::None => None,
            Strategy::Local => Some(Objective::Local),
            Strategy::Global => Some(Objective::Global),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOptions {
    pub strategy: Strategy,
    /// Defaults to the first operator with a latency bound.
    pub bottleneck: Option<NodeId>,
    /// Defaults to the bottleneck's own bound.
    pub bound_ms: Option<f64>,
    pub ptime_band: f64,
    pub update_threshold: f64,
    pub monitor_window: usize,
    pub cost: CostModel,
    pub sample_ms: f64,
}

impl ExperimentOptions {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            bottleneck: None,
            bound_ms: None,
            ptime_band: 0.10,
            update_threshold: 0.05,
            monitor_window: 1000,
            cost: CostModel::Deterministic,
            sample_ms: 1000.0,
        }
    }
}

/// One sampling window at the bottleneck.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub t_ms: f64,
    pub avg_ptime_us: Option<f64>,
    pub p_star_us: Option<f64>,
    pub queue_len: usize,
    pub sojourn_ms: Option<f64>,
    pub shedding: bool,
    pub compliant: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolverStats {
    pub recomputes: u64,
    pub messages: u64,
    pub fallbacks: u64,
    pub lp_iterations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub strategy: Strategy,
    pub mode: WorkloadMode,
    pub seed: u64,
    pub duration_ms: f64,
    pub bottleneck: NodeId,
    pub bound_ms: f64,
    pub ptime_band: f64,
    pub sinks: BTreeMap<NodeId, u64>,
    pub oracle_sinks: BTreeMap<NodeId, u64>,
    pub recall: f64,
    pub deviation_seconds: f64,
    /// Share of evaluated windows inside the band.
    pub compliance: f64,
    pub latency: Vec<LatencyRow>,
    pub operators: BTreeMap<NodeId, OperatorReport>,
    pub solver: SolverStats,
    pub history: Vec<ConfigChange>,
}

/// Everything one experiment produces.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub simulation: SimulationReport,
    pub oracle: SimulationReport,
    pub decisions: Vec<Decision>,
    pub trace: Option<Trace>,
}

/// Weighted sink arrivals of `shedded` over those of `oracle`.
pub fn compute_recall(topology: &Topology, shedded: &SimulationReport, oracle: &SimulationReport) -> f64 {
    let got = shedded.weighted_sink_total(topology);
    let want = oracle.weighted_sink_total(topology);
    if want <= 0.0 {
        log::warn!("oracle run reached no sink; recall taken as 1");
        return 1.0;
    }
    let r = got / want;
    if r > 1.0 {
        log::warn!("shedded run out-produced the oracle ({got} > {want}); recall capped at 1");
    }
    r.clamp(0.0, 1.0)
}

/// Builds the per-window latency rows for `bottleneck` and returns them
/// with the total deviation in seconds and the compliance share.
///
/// A window counts toward deviation when its ptime exceeds p*, or falls
/// short of it while some ratio is below one.
pub fn latency_metrics(
    series: &[SeriesRow],
    bottleneck: &NodeId,
    bound_ms: f64,
    band: f64,
    sample_ms: f64,
    shedding_at: impl Fn(f64) -> bool,
) -> (Vec<LatencyRow>, f64, f64) {
    let mut rows = Vec::new();
    let mut deviation = 0.0;
    let (mut judged, mut ok) = (0u64, 0u64);
    for r in series.iter().filter(|r| &r.operator == bottleneck) {
        let lambda: f64 = r.rates.values().sum();
        let p_star = feasible_ptime(bound_ms / 1000.0, lambda).ok();
        let shedding = shedding_at(r.t_ms);
        let mut compliant = None;
        if let (Some(p_us), Some(ps)) = (r.avg_ptime_us, p_star) {
            let p = p_us / 1e6;
            let rel = (p - ps) / ps;
            if rel > 0.0 || shedding {
                deviation += rel.abs() * sample_ms / 1000.0;
            }
            let inside = rel <= band && (rel >= -band || !shedding);
            compliant = Some(inside);
            judged += 1;
            ok += u64::from(inside);
        }
        rows.push(LatencyRow {
            t_ms: r.t_ms,
            avg_ptime_us: r.avg_ptime_us,
            p_star_us: p_star.map(|p| p * 1e6),
            queue_len: r.queue_len,
            sojourn_ms: r.sojourn_ms,
            shedding,
            compliant,
        });
    }
    let compliance = if judged == 0 { 1.0 } else { ok as f64 / judged as f64 };
    (rows, deviation, compliance)
}

fn pick_bottleneck(topology: &Topology, options: &ExperimentOptions) -> Result<(NodeId, f64), HarnessError> {
    let op = match &options.bottleneck {
        Some(id) => topology
            .operator(id.as_str())
            .ok_or_else(|| HarnessError::UnknownOperator(id.to_string()))?,
        None => topology.bounded_operators().next().ok_or(HarnessError::NoBottleneck)?,
    };
    let bound = options
        .bound_ms
        .or(op.latency_bound_ms)
        .ok_or(HarnessError::NoBottleneck)?;
    Ok((op.id.clone(), bound))
}

/// Simulates the workload under the chosen strategy next to an oracle run
/// with free processing and no shedding.
pub fn run_experiment(
    topology: &Topology,
    workload: &WorkloadSpec,
    options: &ExperimentOptions,
) -> Result<ExperimentRun, HarnessError> {
    let (bottleneck, bound_ms) = pick_bottleneck(topology, options)?;
    let prepared = workload.prepare(topology)?;
    let sim_options = SimOptions {
        horizon_ms: workload.duration_ms,
        seed: workload.seed,
        cost: options.cost,
        sample_ms: options.sample_ms,
        ..SimOptions::default()
    };

    let oracle = Simulation::new(
        topology,
        prepared.arrivals.clone(),
        ShedderConfig::new(),
        SimOptions {
            cost: CostModel::Zero,
            sample_ms: 0.0,
            ..sim_options.clone()
        },
    )?
    .run();

    let sim = Simulation::new(topology, prepared.arrivals, ShedderConfig::new(), sim_options)?;
    let (simulation, controller, decisions) = match options.strategy.objective() {
        None => (sim.run(), None, Vec::new()),
        Some(objective) => {
            let mut copts = ControllerOptions::new(bottleneck.as_str(), bound_ms, objective);
            copts.ptime_band = options.ptime_band;
            copts.update_threshold = options.update_threshold;
            copts.monitor_window = options.monitor_window;
            let c = Controller::new(topology, copts)?;
            let (rep, cr, d) = c.run(sim);
            (rep, Some(cr), d)
        }
    };

    let history = controller.as_ref().map(|c| c.history.clone()).unwrap_or_default();
    let shedding_at = |t: f64| {
        history
            .iter()
            .rev()
            .find(|c| c.t_ms <= t)
            .is_some_and(|c| c.config.is_shedding())
    };
    let (latency, deviation_seconds, compliance) = latency_metrics(
        &simulation.timeseries,
        &bottleneck,
        bound_ms,
        options.ptime_band,
        options.sample_ms,
        shedding_at,
    );
    let solver = controller
        .as_ref()
        .map(|c| SolverStats {
            recomputes: c.recomputes,
            messages: c.messages,
            fallbacks: c.fallbacks,
            lp_iterations: decisions.iter().map(|d| d.lp_iterations as u64).sum::<u64>(),
        })
        .unwrap_or_default();

    let counts = |r: &SimulationReport| r.sinks.iter().map(|(k, s)| (k.clone(), s.total)).collect();
    let report = ExperimentReport {
        strategy: options.strategy,
        mode: workload.mode,
        seed: workload.seed,
        duration_ms: workload.duration_ms,
        bottleneck,
        bound_ms,
        ptime_band: options.ptime_band,
        sinks: counts(&simulation),
        oracle_sinks: counts(&oracle),
        recall: compute_recall(topology, &simulation, &oracle),
        deviation_seconds,
        compliance,
        latency,
        operators: simulation.operators.clone(),
        solver,
        history,
    };
    Ok(ExperimentRun {
        report,
        simulation,
        oracle,
        decisions,
        trace: prepared.trace,
    })
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
