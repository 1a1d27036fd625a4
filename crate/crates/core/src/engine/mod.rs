//! Discrete-event simulation of an operator graph in virtual time.
//!
//! Sources emit Poisson (or evenly spaced) events, or replay a recorded
//! stream. Every operator is a single server with a FIFO queue; its cost per
//! event is the sum of the costs of the patterns that processed it.
//! Everything random comes from per-stream ChaCha8 generators derived from
//! one seed, so a run is a pure function of its inputs.

mod matcher;
mod operator;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use log::debug;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use matcher::{Match, Matcher};
pub use operator::{CostModel, OperatorCounters, OperatorRuntime, Processed};

use crate::model::{Event, NodeId, NodeKind, PatternId, Topology, TypeId};
use crate::shedding::ShedderConfig;
use operator::stream_rng;

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("operator `{operator}` does not consume type {ty}")]
    UnknownType { operator: String, ty: TypeId },
    #[error("horizon must be positive, got {0} ms")]
    InvalidHorizon(f64),
    #[error("unknown source `{0}`")]
    UnknownSource(String),
    #[error("negative rate {rate} for type {ty} at `{node}`")]
    NegativeRate { node: String, ty: TypeId, rate: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalProcess {
    #[default]
    Poisson,
    /// Evenly spaced with a random phase per stream.
    Constant,
}

pub type SourceRates = BTreeMap<NodeId, BTreeMap<TypeId, f64>>;

/// Rates in effect from `at_ms` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePhase {
    pub at_ms: f64,
    pub rates: SourceRates,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceEvent {
    pub source: NodeId,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arrivals {
    Generated {
        process: ArrivalProcess,
        phases: Vec<RatePhase>,
    },
    /// Recorded events, ordered by timestamp.
    Replay(Vec<SourceEvent>),
}

impl Arrivals {
    pub fn poisson(rates: SourceRates) -> Self {
        Arrivals::Generated {
            process: ArrivalProcess::Poisson,
            phases: vec![RatePhase { at_ms: 0.0, rates }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub horizon_ms: f64,
    pub seed: u64,
    pub cost: CostModel,
    pub channel_delay_ms: f64,
    /// Width of a time-series window.
    pub sample_ms: f64,
    /// Keep every completed match in the report (tests only; large).
    pub record_matches: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            horizon_ms: 60_000.0,
            seed: 0,
            cost: CostModel::Deterministic,
            channel_delay_ms: 0.0,
            sample_ms: 1000.0,
            record_matches: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SinkStats {
    pub total: u64,
    pub by_type: BTreeMap<TypeId, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OperatorReport {
    #[serde(flatten)]
    pub counters: OperatorCounters,
    pub rejected: u64,
    pub mean_sojourn_ms: Option<f64>,
    pub max_queue: usize,
    pub final_queue: usize,
}

/// One operator during one time-series window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesRow {
    /// End of the window.
    pub t_ms: f64,
    pub operator: NodeId,
    /// Mean cost of the events finished in the window.
    pub avg_ptime_us: Option<f64>,
    pub queue_len: usize,
    pub sojourn_ms: Option<f64>,
    pub completed: u64,
    /// Arrival rate per input type, events/s.
    pub rates: BTreeMap<TypeId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchRecord {
    pub operator: NodeId,
    pub pattern: PatternId,
    pub event_ids: Vec<u64>,
    pub span_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub seed: u64,
    pub horizon_ms: f64,
    pub sources: BTreeMap<NodeId, BTreeMap<TypeId, u64>>,
    pub operators: BTreeMap<NodeId, OperatorReport>,
    pub sinks: BTreeMap<NodeId, SinkStats>,
    pub timeseries: Vec<SeriesRow>,
    #[serde(skip)]
    pub matches: Vec<MatchRecord>,
}

impl SimulationReport {
    /// Arrivals over all sinks, weighted.
    pub fn weighted_sink_total(&self, topology: &Topology) -> f64 {
        topology
            .sinks
            .iter()
            .map(|s| s.weight * self.sinks.get(&s.id).map_or(0, |x| x.total) as f64)
            .sum()
    }

    pub fn emissions(&self, pattern: &str) -> u64 {
        self.operators
            .values()
            .find_map(|o| o.counters.emissions.get(pattern))
            .copied()
            .unwrap_or(0)
    }

    /// The time series as CSV with one rate column per type seen.
    pub fn timeseries_csv(&self) -> Result<String, csv::Error> {
        let mut types: Vec<TypeId> = self.timeseries.iter().flat_map(|r| r.rates.keys().copied()).collect();
        types.sort();
        types.dedup();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["t_ms", "operator", "avg_ptime_us", "queue_len", "sojourn_ms"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(types.iter().map(|t| format!("rate_{t}")));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for r in &self.timeseries {
            let mut rec = vec![
                r.t_ms.to_string(),
                r.operator.to_string(),
                opt(r.avg_ptime_us),
                r.queue_len.to_string(),
                opt(r.sojourn_ms),
            ];
            rec.extend(types.iter().map(|t| r.rates.get(t).copied().unwrap_or(0.0).to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone)]
enum Action {
    Arrival { source: usize, ty: TypeId, generation: u64 },
    Replay(usize),
    Deliver { to: usize, event: Event },
    Done(usize),
    Phase(usize),
    Config(ShedderConfig),
    Sample,
}

#[derive(Debug)]
struct Scheduled {
    t: f64,
    seq: u64,
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        self.t.total_cmp(&other.t).then(self.seq.cmp(&other.seq))
    }
}

/// What a call to [`Simulation::step`] did.
#[derive(Debug, Clone)]
pub enum Step {
    Emitted {
        source: usize,
        event_type: TypeId,
        t_ms: f64,
    },
    Processed {
        operator: usize,
        record: Processed,
    },
    ConfigApplied {
        t_ms: f64,
    },
    Sampled {
        t_ms: f64,
    },
    Other,
}

#[derive(Debug, Clone, Default)]
struct WindowStats {
    completed: u64,
    cost_ms: f64,
    sojourn_ms: f64,
    arrivals: BTreeMap<TypeId, u64>,
}

#[derive(Debug, Clone, Default)]
struct OpExtra {
    rejected: u64,
    sojourn_sum: f64,
    completed: u64,
    max_queue: usize,
    window: WindowStats,
}

#[derive(Debug)]
struct Stream {
    rng: ChaCha8Rng,
    rate: f64,
    generation: u64,
    started: bool,
}

pub struct Simulation {
    topology: Topology,
    options: SimOptions,
    heap: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    now: f64,
    next_id: u64,
    config: ShedderConfig,
    operators: Vec<OperatorRuntime>,
    in_service: Vec<Option<Processed>>,
    extra: Vec<OpExtra>,
    /// Outgoing routes per source and per operator: (target node, types).
    source_routes: Vec<Vec<(NodeKind, Vec<TypeId>)>>,
    operator_routes: Vec<Vec<(NodeKind, Vec<TypeId>)>>,
    streams: BTreeMap<(usize, TypeId), Stream>,
    process: ArrivalProcess,
    phases: Vec<RatePhase>,
    replay: Vec<SourceEvent>,
    source_counts: Vec<BTreeMap<TypeId, u64>>,
    sinks: Vec<SinkStats>,
    timeseries: Vec<SeriesRow>,
    matches: Vec<MatchRecord>,
    last_sample_ms: f64,
}

impl Simulation {
    pub fn new(
        topology: &Topology,
        arrivals: Arrivals,
        config: ShedderConfig,
        options: SimOptions,
    ) -> Result<Self, EngineError> {
        if !(options.horizon_ms > 0.0) {
            return Err(EngineError::InvalidHorizon(options.horizon_ms));
        }
        let routes = |from: &str| -> Vec<(NodeKind, Vec<TypeId>)> {
            topology
                .edges_from(from)
                .filter_map(|e| topology.node_kind(e.to.as_str()).map(|k| (k, e.types.clone())))
                .collect()
        };
        let operators = topology
            .operators
            .iter()
            .enumerate()
            .map(|(i, o)| OperatorRuntime::new(o, options.seed, i as u64, options.cost))
            .collect();
        let n_ops = topology.operators.len();
        let (process, phases, replay) = match arrivals {
            Arrivals::Generated { process, mut phases } => {
                phases.sort_by(|a, b| a.at_ms.total_cmp(&b.at_ms));
                (process, phases, Vec::new())
            }
            Arrivals::Replay(mut events) => {
                events.sort_by(|a, b| a.event.ts.total_cmp(&b.event.ts));
                (ArrivalProcess::Poisson, Vec::new(), events)
            }
        };
        for ph in &phases {
            for (src, rates) in &ph.rates {
                if topology.sources.iter().all(|s| s.id != *src) {
                    return Err(EngineError::UnknownSource(src.to_string()));
                }
                if let Some((&ty, &rate)) = rates.iter().find(|(_, &r)| !(r >= 0.0)) {
                    return Err(EngineError::NegativeRate {
                        node: src.to_string(),
                        ty,
                        rate,
                    });
                }
            }
        }
        if let Some(e) = replay
            .iter()
            .find(|e| topology.sources.iter().all(|s| s.id != e.source))
        {
            return Err(EngineError::UnknownSource(e.source.to_string()));
        }

        let mut sim = Self {
            source_routes: topology.sources.iter().map(|s| routes(s.id.as_str())).collect(),
            operator_routes: topology.operators.iter().map(|o| routes(o.id.as_str())).collect(),
            topology: topology.clone(),
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            next_id: 0,
            config,
            operators,
            in_service: vec![None; n_ops],
            extra: vec![OpExtra::default(); n_ops],
            streams: BTreeMap::new(),
            process,
            phases,
            replay,
            source_counts: vec![BTreeMap::new(); topology.sources.len()],
            sinks: vec![SinkStats::default(); topology.sinks.len()],
            timeseries: Vec::new(),
            matches: Vec::new(),
            last_sample_ms: 0.0,
            options,
        };
        for i in 0..sim.phases.len() {
            let at = sim.phases[i].at_ms;
            sim.schedule(at, Action::Phase(i));
        }
        if !sim.replay.is_empty() {
            let t = sim.replay[0].event.ts;
            sim.schedule(t, Action::Replay(0));
        }
        if sim.options.sample_ms > 0.0 {
            let t = sim.options.sample_ms;
            sim.schedule(t, Action::Sample);
        }
        Ok(sim)
    }

    fn schedule(&mut self, t: f64, action: Action) {
        self.seq += 1;
        self.heap.push(Reverse(Scheduled {
            t,
            seq: self.seq,
            action,
        }));
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn config(&self) -> &ShedderConfig {
        &self.config
    }

    pub fn operator(&self, i: usize) -> &OperatorRuntime {
        &self.operators[i]
    }

    /// Replaces the shedder configuration before the next dequeue.
    pub fn set_config(&mut self, config: ShedderConfig) {
        self.config = config;
    }

    /// Replaces the shedder configuration at virtual time `at_ms`.
    pub fn schedule_config(&mut self, at_ms: f64, config: ShedderConfig) {
        self.schedule(at_ms.max(self.now), Action::Config(config));
    }

    /// Executes the next scheduled action. `None` once the horizon is reached.
    pub fn step(&mut self) -> Option<Step> {
        let next = self.heap.peek()?;
        if next.0.t > self.options.horizon_ms {
            return None;
        }
        let Reverse(Scheduled { t, action, .. }) = self.heap.pop()?;
        self.now = t;
        Some(match action {
            Action::Arrival { source, ty, generation } => {
                let live = self
                    .streams
                    .get(&(source, ty))
                    .is_some_and(|s| s.generation == generation);
                if !live {
                    return Some(Step::Other);
                }
                let event = Event::new(self.take_id(), ty, t);
                self.emit_from_source(source, event);
                self.schedule_arrival(source, ty);
                Step::Emitted {
                    source,
                    event_type: ty,
                    t_ms: t,
                }
            }
            Action::Replay(i) => {
                let SourceEvent { source, event } = self.replay[i].clone();
                if let Some(next) = self.replay.get(i + 1) {
                    let nt = next.event.ts;
                    self.schedule(nt, Action::Replay(i + 1));
                }
                let src = self
                    .topology
                    .sources
                    .iter()
                    .position(|s| s.id == source)
                    .expect("checked in new");
                let ty = self.topology.classify(event.event_type, &event.attributes);
                let event = Event {
                    id: self.take_id(),
                    event_type: ty,
                    ..event
                };
                self.emit_from_source(src, event);
                Step::Emitted {
                    source: src,
                    event_type: ty,
                    t_ms: t,
                }
            }
            Action::Deliver { to, event } => {
                self.deliver(to, event);
                Step::Other
            }
            Action::Done(op) => self.finish_service(op),
            Action::Phase(i) => {
                self.start_phase(i);
                Step::Other
            }
            Action::Config(c) => {
                self.config = c;
                Step::ConfigApplied { t_ms: t }
            }
            Action::Sample => {
                self.sample();
                let next = t + self.options.sample_ms;
                self.schedule(next, Action::Sample);
                Step::Sampled { t_ms: t }
            }
        })
    }

    /// Runs to the horizon.
    pub fn run(mut self) -> SimulationReport {
        while self.step().is_some() {}
        self.finish()
    }

    fn take_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn start_phase(&mut self, i: usize) {
        let rates = self.phases[i].rates.clone();
        for (src, per_type) in &rates {
            let s = self
                .topology
                .sources
                .iter()
                .position(|x| x.id == *src)
                .expect("checked in new");
            for (&ty, &rate) in per_type {
                let seed = self.options.seed;
                let stream = self.streams.entry((s, ty)).or_insert_with(|| Stream {
                    rng: stream_rng(seed, (1 << 32) | ((s as u64) << 16) | u64::from(ty.0)),
                    rate: 0.0,
                    generation: 0,
                    started: false,
                });
                stream.rate = rate;
                stream.generation += 1;
                stream.started = false;
                self.schedule_arrival(s, ty);
            }
        }
    }

    fn schedule_arrival(&mut self, source: usize, ty: TypeId) {
        let process = self.process;
        let now = self.now;
        let Some(stream) = self.streams.get_mut(&(source, ty)) else {
            return;
        };
        if stream.rate <= 0.0 {
            return;
        }
        let per_ms = stream.rate / 1000.0;
        let gap = match process {
            ArrivalProcess::Poisson => Exp::new(per_ms).expect("positive rate").sample(&mut stream.rng),
            // the first arrival of a phase gets a random offset
            ArrivalProcess::Constant if !stream.started => stream.rng.random::<f64>() / per_ms,
            ArrivalProcess::Constant => 1.0 / per_ms,
        };
        stream.started = true;
        let generation = stream.generation;
        self.schedule(now + gap, Action::Arrival { source, ty, generation });
    }

    fn emit_from_source(&mut self, source: usize, event: Event) {
        *self.source_counts[source].entry(event.event_type).or_default() += 1;
        let targets: Vec<NodeKind> = self.source_routes[source]
            .iter()
            .filter(|(_, types)| types.contains(&event.event_type))
            .map(|(k, _)| *k)
            .collect();
        for k in targets {
            self.send(k, event.clone());
        }
    }

    fn send(&mut self, target: NodeKind, event: Event) {
        match target {
            NodeKind::Sink(s) => {
                let stats = &mut self.sinks[s];
                stats.total += 1;
                *stats.by_type.entry(event.event_type).or_default() += 1;
            }
            NodeKind::Operator(op) => {
                if self.options.channel_delay_ms > 0.0 {
                    let t = self.now + self.options.channel_delay_ms;
                    self.schedule(t, Action::Deliver { to: op, event });
                } else {
                    self.deliver(op, event);
                }
            }
            NodeKind::Source(_) => {}
        }
    }

    fn deliver(&mut self, op: usize, event: Event) {
        let ty = event.event_type;
        match self.operators[op].ingest(event, self.now) {
            Ok(()) => {
                let x = &mut self.extra[op];
                *x.window.arrivals.entry(ty).or_default() += 1;
                x.max_queue = x.max_queue.max(self.operators[op].queue_len());
                self.try_start(op);
            }
            Err(e) => {
                debug!("{e}");
                self.extra[op].rejected += 1;
            }
        }
    }

    fn try_start(&mut self, op: usize) {
        if self.in_service[op].is_some() {
            return;
        }
        let Some(rec) = self.operators[op].process_next(self.now, &self.config) else {
            return;
        };
        let done = rec.done_ms();
        self.in_service[op] = Some(rec);
        self.schedule(done, Action::Done(op));
    }

    fn finish_service(&mut self, op: usize) -> Step {
        let mut rec = self.in_service[op].take().expect("operator was busy");
        let sojourn = self.now - rec.arrived_ms;
        let x = &mut self.extra[op];
        x.sojourn_sum += sojourn;
        x.completed += 1;
        x.window.completed += 1;
        x.window.cost_ms += rec.cost_ms;
        x.window.sojourn_ms += sojourn;

        if self.options.record_matches {
            let operator = self.topology.operators[op].id.clone();
            self.matches.extend(rec.matches.iter().map(|m| MatchRecord {
                operator: operator.clone(),
                pattern: m.pattern.clone(),
                event_ids: m.events.iter().map(|e| e.id).collect(),
                span_ms: m.span_ms(),
            }));
        }
        for (_, out) in rec.outputs.iter_mut() {
            out.id = self.take_id();
        }
        for (_, out) in &rec.outputs {
            let targets: Vec<NodeKind> = self.operator_routes[op]
                .iter()
                .filter(|(_, types)| types.contains(&out.event_type))
                .map(|(k, _)| *k)
                .collect();
            for k in targets {
                self.send(k, out.clone());
            }
        }
        self.try_start(op);
        Step::Processed {
            operator: op,
            record: rec,
        }
    }

    fn sample(&mut self) {
        let width_s = (self.now - self.last_sample_ms) / 1000.0;
        self.last_sample_ms = self.now;
        for (i, op) in self.operators.iter().enumerate() {
            let w = std::mem::take(&mut self.extra[i].window);
            let mut rates: BTreeMap<TypeId, f64> = op.spec.input_types().into_iter().map(|t| (t, 0.0)).collect();
            for (t, n) in w.arrivals {
                rates.insert(t, n as f64 / width_s);
            }
            let mean = |sum: f64| (w.completed > 0).then(|| sum / w.completed as f64);
            self.timeseries.push(SeriesRow {
                t_ms: self.now,
                operator: op.spec.id.clone(),
                avg_ptime_us: mean(w.cost_ms * 1000.0),
                queue_len: op.queue_len(),
                sojourn_ms: mean(w.sojourn_ms),
                completed: w.completed,
                rates,
            });
        }
    }

    pub fn finish(self) -> SimulationReport {
        let operators = self
            .operators
            .iter()
            .zip(&self.extra)
            .map(|(o, x)| {
                (
                    o.spec.id.clone(),
                    OperatorReport {
                        counters: o.counters.clone(),
                        rejected: x.rejected,
                        mean_sojourn_ms: (x.completed > 0).then(|| x.sojourn_sum / x.completed as f64),
                        max_queue: x.max_queue,
                        final_queue: o.queue_len(),
                    },
                )
            })
            .collect();
        SimulationReport {
            seed: self.options.seed,
            horizon_ms: self.options.horizon_ms,
            sources: self
                .topology
                .sources
                .iter()
                .zip(self.source_counts)
                .map(|(s, c)| (s.id.clone(), c))
                .collect(),
            operators,
            sinks: self
                .topology
                .sinks
                .iter()
                .zip(self.sinks)
                .map(|(s, c)| (s.id.clone(), c))
                .collect(),
            timeseries: self.timeseries,
            matches: self.matches,
        }
    }
}

pub fn run_simulation(
    topology: &Topology,
    arrivals: Arrivals,
    config: ShedderConfig,
    options: SimOptions,
) -> Result<SimulationReport, EngineError> {
    Ok(Simulation::new(topology, arrivals, config, options)?.run())
}
