//! Runtime re-planning.
//!
//! Every node keeps running averages over its last `N` events and reports
//! them when they drift from what it reported last. The controller keeps
//! the latest report per node, derives each operator's arrivals from its
//! upstream outputs, and re-solves the LP when the bottleneck's processing
//! time leaves the band around `p*`.

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Processed, Simulation, SimulationReport, Step};
use crate::lp::{optimize, Objective};
use crate::model::{NodeId, PatternId, Topology, TypeId};
use crate::shedding::{avg_ptime_op, feasible_ptime, OperatorSnapshot, ShedderConfig, Snapshot};

/// Guards relative deviations against zero baselines.
const EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ControllerError {
    #[error("bottleneck `{0}` is not an operator")]
    UnknownBottleneck(String),
    #[error("latency bound must be positive, got {0} ms")]
    InvalidBound(f64),
    #[error("monitor window must be at least 1")]
    EmptyWindow,
}

/// Mean of the last `window_n` samples, or of all of them during warm-up.
pub fn running_average(samples: &[f64], window_n: usize) -> f64 {
    let n = window_n.max(1).min(samples.len());
    if n == 0 {
        return 0.0;
    }
    samples[samples.len() - n..].iter().sum::<f64>() / n as f64
}

/// Averages reported by one node.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsUpdate {
    pub node: NodeId,
    pub t_ms: f64,
    /// Mean processing time per dequeued event, seconds. Operators only.
    pub avg_ptime_s: Option<f64>,
    /// Mean processing time per processed (event, pattern), seconds.
    pub pattern_ptime_s: BTreeMap<PatternId, f64>,
    /// Output rate per pattern, events/s. Operators only.
    pub pattern_outputs: BTreeMap<PatternId, f64>,
    /// Output rate per type, events/s.
    pub type_outputs: BTreeMap<TypeId, f64>,
}

impl MetricsUpdate {
    fn metrics(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        if let Some(p) = self.avg_ptime_s {
            out.push(("ptime".to_owned(), p));
        }
        out.extend(self.pattern_ptime_s.iter().map(|(k, v)| (format!("ptime:{k}"), *v)));
        out.extend(self.pattern_outputs.iter().map(|(k, v)| (format!("out:{k}"), *v)));
        out.extend(self.type_outputs.iter().map(|(k, v)| (format!("type:{k}"), *v)));
        out
    }
}

/// Whether `update` differs enough from the last report to be sent.
pub fn should_emit(update: &MetricsUpdate, last: Option<&MetricsUpdate>, threshold: f64) -> bool {
    let Some(last) = last else {
        return true;
    };
    let old: BTreeMap<String, f64> = last.metrics().into_iter().collect();
    let new = update.metrics();
    if new.len() != old.len() {
        return true;
    }
    new.iter().any(|(k, v)| match old.get(k) {
        Some(o) => (v - o).abs() / o.abs().max(EPS) >= threshold,
        None => true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Reason {
    /// Processing time above the band: shed more.
    Overload,
    /// Processing time below the band while shedding: shed less.
    Overshed,
}

/// The trigger rule on its own.
pub fn needs_recompute(p_meas: f64, p_star: f64, shedding: bool, band: f64) -> Option<Reason> {
    if p_meas > p_star * (1.0 + band) {
        Some(Reason::Overload)
    } else if shedding && p_meas < p_star * (1.0 - band) {
        Some(Reason::Overshed)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum EmissionMode {
    /// Report on deviation from the last report.
    #[default]
    Event,
    /// Report unconditionally every `period_ms`.
    Frequency { period_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerOptions {
    pub bottleneck: NodeId,
    pub bound_ms: f64,
    pub objective: Objective,
    pub monitor_window: usize,
    pub ptime_band: f64,
    pub update_threshold: f64,
    pub debounce_ms: f64,
    /// Time between deciding on a configuration and the bottleneck using it.
    pub delivery_delay_ms: f64,
    pub emission: EmissionMode,
}

impl ControllerOptions {
    pub fn new(bottleneck: &str, bound_ms: f64, objective: Objective) -> Self {
        Self {
            bottleneck: bottleneck.into(),
            bound_ms,
            objective,
            monitor_window: 1000,
            ptime_band: 0.10,
            update_threshold: 0.05,
            debounce_ms: 1000.0,
            delivery_delay_ms: 0.0,
            emission: EmissionMode::Event,
        }
    }
}

/// One re-planning step, as logged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    #[serde(rename = "t")]
    pub t_ms: f64,
    pub reason: Reason,
    pub bottleneck: NodeId,
    pub p_meas: f64,
    pub p_star: f64,
    /// Wall-clock solver time; not reproducible.
    pub solver_ms: f64,
    pub predicted_output: Option<f64>,
    pub lp_iterations: usize,
    pub fallback: bool,
    /// Events processed at the bottleneck so far.
    pub bottleneck_events: u64,
    pub config: ShedderConfig,
}

/// What the controller knows.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ControllerState {
    pub reports: BTreeMap<NodeId, MetricsUpdate>,
    pub config: ShedderConfig,
    pub bottleneck: NodeId,
    pub bound_s: f64,
    pub recomputes: u64,
    pub messages: u64,
}

impl ControllerState {
    /// Snapshot from the latest reports. Operator arrivals are the sums of
    /// what their upstream nodes reported sending.
    pub fn snapshot(&self, topology: &Topology, t_ms: f64) -> Snapshot {
        let mut snap = Snapshot {
            t_ms,
            ..Snapshot::default()
        };
        for s in &topology.sources {
            if let Some(r) = self.reports.get(&s.id) {
                snap.sources.insert(s.id.clone(), r.type_outputs.clone());
            }
        }
        for o in &topology.operators {
            let mut op = OperatorSnapshot::default();
            for e in topology.edges_into(o.id.as_str()) {
                let Some(r) = self.reports.get(&e.from) else {
                    continue;
                };
                for &t in &e.types {
                    if let Some(&v) = r.type_outputs.get(&t) {
                        *op.arrivals.entry(t).or_default() += v;
                    }
                }
            }
            if let Some(r) = self.reports.get(&o.id) {
                op.ptime_s = r.pattern_ptime_s.clone();
                op.outputs = r.pattern_outputs.clone();
                op.mu = r.avg_ptime_s.filter(|&p| p > 0.0).map(|p| 1.0 / p);
            }
            snap.operators.insert(o.id.clone(), op);
        }
        snap
    }

    /// Mean processing time at the bottleneck under the active ratios,
    /// composed from the reported per-type arrival rates and per-pattern
    /// processing times. `None` until the bottleneck has reported.
    pub fn ptime(&self, topology: &Topology) -> Option<f64> {
        self.reports.get(&self.bottleneck)?;
        let snap = self.snapshot(topology, 0.0);
        Some(avg_ptime_op(&self.config, snap.operator(self.bottleneck.as_str())?))
    }

    pub fn lambda(&self, topology: &Topology) -> f64 {
        self.snapshot(topology, 0.0)
            .operator(self.bottleneck.as_str())
            .map_or(0.0, OperatorSnapshot::lambda)
    }
}

/// Fixed-size ring of recent values.
#[derive(Debug, Clone)]
struct Ring<T> {
    cap: usize,
    items: VecDeque<T>,
}

impl<T> Ring<T> {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            items: VecDeque::with_capacity(cap),
        }
    }

    fn push(&mut self, v: T) {
        if self.items.len() == self.cap {
            self.items.pop_front();
        }
        self.items.push_back(v);
    }

    fn is_full(&self) -> bool {
        self.items.len() == self.cap
    }
}

impl Ring<f64> {
    fn mean(&self) -> Option<f64> {
        (!self.items.is_empty()).then(|| self.items.iter().sum::<f64>() / self.items.len() as f64)
    }
}

/// Event rate over the last `N` timestamps, or since `started_ms` while
/// fewer have been seen.
fn ring_rate(ring: &Ring<f64>, started_ms: f64, now_ms: f64) -> f64 {
    let from = match ring.items.front() {
        Some(&t) if ring.is_full() => t,
        _ => started_ms,
    };
    let span_s = (now_ms - from) / 1000.0;
    if span_s > 0.0 {
        ring.items.len() as f64 / span_s
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
struct Monitor {
    node: NodeId,
    /// Pattern ids and output types in declaration order (operators only).
    patterns: Vec<(PatternId, TypeId)>,
    started_ms: f64,
    costs: Ring<f64>,
    pattern_costs: Vec<Ring<f64>>,
    /// Output timestamps per type and per pattern.
    type_out: BTreeMap<TypeId, Ring<f64>>,
    pattern_out: Vec<Ring<f64>>,
    window: usize,
    since_check: usize,
    last: Option<MetricsUpdate>,
    last_sent_ms: f64,
}

impl Monitor {
    fn new(node: NodeId, patterns: Vec<(PatternId, TypeId)>, types: &[TypeId], n: usize) -> Self {
        Self {
            node,
            pattern_costs: patterns.iter().map(|_| Ring::new(n)).collect(),
            pattern_out: patterns.iter().map(|_| Ring::new(n)).collect(),
            type_out: types.iter().map(|&t| (t, Ring::new(n))).collect(),
            patterns,
            started_ms: 0.0,
            costs: Ring::new(n),
            window: n,
            since_check: 0,
            last: None,
            last_sent_ms: f64::NEG_INFINITY,
        }
    }

    fn record_output(&mut self, ty: TypeId, t_ms: f64) {
        let n = self.window;
        self.type_out.entry(ty).or_insert_with(|| Ring::new(n)).push(t_ms);
    }

    fn record_processed(&mut self, rec: &Processed) {
        self.costs.push(rec.cost_ms / 1000.0);
        for (ring, c) in self.pattern_costs.iter_mut().zip(&rec.pattern_cost_ms) {
            if let Some(c) = c {
                ring.push(c / 1000.0);
            }
        }
        for (i, e) in &rec.outputs {
            self.pattern_out[*i].push(e.ts);
            self.record_output(e.event_type, e.ts);
        }
        self.since_check += 1;
    }

    fn record_emitted(&mut self, ty: TypeId, t_ms: f64) {
        self.record_output(ty, t_ms);
        self.since_check += 1;
    }

    /// Forget processing-time samples, e.g. after the ratios changed.
    fn reset_costs(&mut self) {
        self.costs.items.clear();
        self.since_check = 0;
        self.last = None;
    }

    fn current(&self, now_ms: f64, nominal: &[f64]) -> MetricsUpdate {
        let start = self.started_ms;
        MetricsUpdate {
            node: self.node.clone(),
            t_ms: now_ms,
            avg_ptime_s: if self.patterns.is_empty() {
                None
            } else {
                self.costs.mean()
            },
            pattern_ptime_s: self
                .patterns
                .iter()
                .zip(&self.pattern_costs)
                .zip(nominal)
                .map(|(((p, _), ring), &nom)| (p.clone(), ring.mean().unwrap_or(nom)))
                .collect(),
            pattern_outputs: self
                .patterns
                .iter()
                .zip(&self.pattern_out)
                .map(|((p, _), ring)| (p.clone(), ring_rate(ring, start, now_ms)))
                .collect(),
            type_outputs: self
                .type_out
                .iter()
                .map(|(&t, ring)| (t, ring_rate(ring, start, now_ms)))
                .collect(),
        }
    }
}

/// Summary kept in experiment reports. Leaves out wall-clock times.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ControllerReport {
    pub recomputes: u64,
    pub messages: u64,
    pub fallbacks: u64,
    pub history: Vec<ConfigChange>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigChange {
    pub t_ms: f64,
    pub reason: Reason,
    pub p_meas: f64,
    pub p_star: f64,
    pub predicted_output: Option<f64>,
    pub lp_iterations: usize,
    pub fallback: bool,
    pub bottleneck_events: u64,
    pub config: ShedderConfig,
}

pub struct Controller {
    topology: Topology,
    options: ControllerOptions,
    state: ControllerState,
    monitors: BTreeMap<NodeId, Monitor>,
    nominal: BTreeMap<NodeId, Vec<f64>>,
    decisions: Vec<Decision>,
    bottleneck_index: usize,
    bottleneck_events: u64,
    last_recompute_ms: Option<f64>,
    /// Set between pushing a configuration and the first report measured
    /// under it.
    awaiting_fresh: bool,
}

impl Controller {
    pub fn new(topology: &Topology, options: ControllerOptions) -> Result<Self, ControllerError> {
        let bottleneck_index = topology
            .operator_index(options.bottleneck.as_str())
            .ok_or_else(|| ControllerError::UnknownBottleneck(options.bottleneck.to_string()))?;
        if !(options.bound_ms > 0.0) {
            return Err(ControllerError::InvalidBound(options.bound_ms));
        }
        if options.monitor_window == 0 {
            return Err(ControllerError::EmptyWindow);
        }
        let n = options.monitor_window;
        let mut monitors = BTreeMap::new();
        let mut nominal = BTreeMap::new();
        for s in &topology.sources {
            monitors.insert(s.id.clone(), Monitor::new(s.id.clone(), Vec::new(), &s.types, n));
            nominal.insert(s.id.clone(), Vec::new());
        }
        for o in &topology.operators {
            let patterns: Vec<(PatternId, TypeId)> = o.patterns.iter().map(|p| (p.id.clone(), p.output_type)).collect();
            let types: Vec<TypeId> = o.output_types().into_iter().collect();
            monitors.insert(o.id.clone(), Monitor::new(o.id.clone(), patterns, &types, n));
            nominal.insert(o.id.clone(), o.patterns.iter().map(|p| p.ptime_s()).collect());
        }
        Ok(Self {
            state: ControllerState {
                bottleneck: options.bottleneck.clone(),
                bound_s: options.bound_ms / 1000.0,
                ..ControllerState::default()
            },
            topology: topology.clone(),
            options,
            monitors,
            nominal,
            decisions: Vec::new(),
            bottleneck_index,
            bottleneck_events: 0,
            last_recompute_ms: None,
            awaiting_fresh: false,
        })
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.decisions
    }

    pub fn bottleneck_events(&self) -> u64 {
        self.bottleneck_events
    }

    /// Feeds one simulation step to the monitors; may push a configuration.
    pub fn observe(&mut self, sim: &mut Simulation, step: &Step) {
        let node = match step {
            Step::Emitted {
                source,
                event_type,
                t_ms,
            } => {
                let id = self.topology.sources[*source].id.clone();
                self.monitors
                    .get_mut(&id)
                    .expect("monitor per source")
                    .record_emitted(*event_type, *t_ms);
                id
            }
            Step::Processed { operator, record } => {
                if *operator == self.bottleneck_index {
                    self.bottleneck_events += 1;
                }
                let id = self.topology.operators[*operator].id.clone();
                self.monitors
                    .get_mut(&id)
                    .expect("monitor per operator")
                    .record_processed(record);
                id
            }
            Step::ConfigApplied { .. } => {
                let b = self.options.bottleneck.clone();
                self.monitors.get_mut(&b).expect("bottleneck monitor").reset_costs();
                self.awaiting_fresh = true;
                return;
            }
            _ => return,
        };
        let now = sim.now();
        let check_every = (self.options.monitor_window / 10).max(1);
        let m = self.monitors.get_mut(&node).expect("monitor exists");
        if m.since_check < check_every {
            return;
        }
        m.since_check = 0;
        // operators report once their processing-time window is full
        if !m.patterns.is_empty() && !m.costs.is_full() {
            return;
        }
        let update = m.current(now, &self.nominal[&node]);
        let send = match self.options.emission {
            EmissionMode::Event => should_emit(&update, m.last.as_ref(), self.options.update_threshold),
            EmissionMode::Frequency { period_ms } => now - m.last_sent_ms >= period_ms as f64,
        };
        if !send {
            return;
        }
        m.last = Some(update.clone());
        m.last_sent_ms = now;
        self.receive(sim, update);
    }

    fn receive(&mut self, sim: &mut Simulation, update: MetricsUpdate) {
        self.state.messages += 1;
        if update.node == self.options.bottleneck {
            self.awaiting_fresh = false;
        }
        self.state.reports.insert(update.node.clone(), update);
        if self.awaiting_fresh {
            return;
        }
        let now = sim.now();
        if self
            .last_recompute_ms
            .is_some_and(|t| now - t < self.options.debounce_ms)
        {
            return;
        }
        let Some(p_meas) = self.state.ptime(&self.topology) else {
            return;
        };
        let lambda = self.state.lambda(&self.topology);
        let p_star = feasible_ptime(self.state.bound_s, lambda).expect("bound checked in new");
        if let Some(reason) = needs_recompute(p_meas, p_star, self.state.config.is_shedding(), self.options.ptime_band)
        {
            self.recompute_and_apply(sim, reason, p_meas, p_star);
        }
    }

    /// Solves for the latest snapshot and schedules the result at the
    /// bottleneck. Falls back to scaling every ratio by `p*/p` when the LP
    /// cannot be solved.
    pub fn recompute_and_apply(
        &mut self,
        sim: &mut Simulation,
        reason: Reason,
        p_meas: f64,
        p_star: f64,
    ) -> ShedderConfig {
        let now = sim.now();
        let snapshot = self.state.snapshot(&self.topology, now);
        let started = Instant::now();
        let result = optimize(
            &self.topology,
            &snapshot,
            self.options.bottleneck.as_str(),
            p_star,
            self.options.objective,
        );
        let solver_ms = started.elapsed().as_secs_f64() * 1000.0;
        let (config, predicted_output, lp_iterations, fallback) = match result {
            Ok(plan) => (plan.config, Some(plan.predicted_output), plan.iterations, false),
            Err(e) => {
                warn!("planning at t={now} ms failed ({e}); scaling ratios by p*/p");
                let op = &self.topology.operators[self.bottleneck_index];
                let pairs: Vec<(PatternId, TypeId)> = op
                    .patterns
                    .iter()
                    .flat_map(|p| op.input_types().into_iter().map(move |t| (p.id.clone(), t)))
                    .collect();
                let factor = if p_meas > 0.0 { p_star / p_meas } else { 1.0 };
                (self.state.config.scaled(&pairs, factor), None, 0, true)
            }
        };
        info!(
            "t={now:.0} ms {reason:?}: p={:.1} us p*={:.1} us, predicted {predicted_output:?}",
            p_meas * 1e6,
            p_star * 1e6
        );
        self.state.recomputes += 1;
        self.state.config = config.clone();
        self.last_recompute_ms = Some(now);
        sim.schedule_config(now + self.options.delivery_delay_ms, config.clone());
        self.decisions.push(Decision {
            t_ms: now,
            reason,
            bottleneck: self.options.bottleneck.clone(),
            p_meas,
            p_star,
            solver_ms,
            predicted_output,
            lp_iterations,
            fallback,
            bottleneck_events: self.bottleneck_events,
            config: config.clone(),
        });
        config
    }

    /// Runs `sim` to its horizon under control.
    pub fn run(mut self, mut sim: Simulation) -> (SimulationReport, ControllerReport, Vec<Decision>) {
        while let Some(step) = sim.step() {
            self.observe(&mut sim, &step);
        }
        let report = ControllerReport {
            recomputes: self.state.recomputes,
            messages: self.state.messages,
            fallbacks: self.decisions.iter().filter(|d| d.fallback).count() as u64,
            history: self
                .decisions
                .iter()
                .map(|d| ConfigChange {
                    t_ms: d.t_ms,
                    reason: d.reason,
                    p_meas: d.p_meas,
                    p_star: d.p_star,
                    predicted_output: d.predicted_output,
                    lp_iterations: d.lp_iterations,
                    fallback: d.fallback,
                    bottleneck_events: d.bottleneck_events,
                    config: d.config.clone(),
                })
                .collect(),
        };
        (sim.finish(), report, self.decisions)
    }

    /// Decisions as JSON lines.
    pub fn decisions_jsonl(decisions: &[Decision]) -> String {
        decisions
            .iter()
            .map(|d| serde_json::to_string(d).expect("decision serializes") + "\n")
            .collect()
    }
}
