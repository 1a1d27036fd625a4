use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::matcher::{Match, Matcher};
use super::EngineError;
use crate::model::{Event, OperatorSpec, PatternId, TypeId, Value};
use crate::shedding::{should_process, ShedderConfig};

/// How the virtual cost of processing one event at one pattern is drawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostModel {
    /// Exactly the pattern's nominal `ptime_us`.
    #[default]
    Deterministic,
    /// Exponential with the nominal value as mean.
    Exponential,
    /// Free processing; used for oracle runs.
    Zero,
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
struct Queued {
    event: Event,
    arrived_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OperatorCounters {
    pub arrivals: BTreeMap<TypeId, u64>,
    /// Events dequeued.
    pub events: u64,
    /// (event, pattern) pairs processed and shed.
    pub processed: BTreeMap<PatternId, u64>,
    pub shed: BTreeMap<PatternId, u64>,
    /// Complex events emitted, copies included.
    pub emissions: BTreeMap<PatternId, u64>,
    pub busy_ms: f64,
}

/// Outcome of one dequeue.
#[derive(Debug, Clone)]
pub struct Processed {
    pub event: Event,
    pub arrived_ms: f64,
    pub started_ms: f64,
    pub cost_ms: f64,
    /// Cost per pattern in declaration order; `None` where shed.
    pub pattern_cost_ms: Vec<Option<f64>>,
    /// Emitted complex events with the index of the emitting pattern.
    pub outputs: Vec<(usize, Event)>,
    pub matches: Vec<Match>,
}

impl Processed {
    pub fn done_ms(&self) -> f64 {
        self.started_ms + self.cost_ms
    }
}

/// One operator: a FIFO queue in front of its patterns.
#[derive(Debug, Clone)]
pub struct OperatorRuntime {
    pub spec: OperatorSpec,
    inputs: BTreeSet<TypeId>,
    queue: VecDeque<Queued>,
    matchers: Vec<Matcher>,
    shed_rng: ChaCha8Rng,
    cost_rng: ChaCha8Rng,
    cost: CostModel,
    clock_ms: f64,
    pub counters: OperatorCounters,
}

impl OperatorRuntime {
    pub fn new(spec: &OperatorSpec, seed: u64, index: u64, cost: CostModel) -> Self {
        Self {
            inputs: spec.input_types(),
            matchers: spec.patterns.iter().map(Matcher::new).collect(),
            spec: spec.clone(),
            queue: VecDeque::new(),
            shed_rng: stream_rng(seed, (2 << 32) | index),
            cost_rng: stream_rng(seed, (3 << 32) | index),
            cost,
            clock_ms: 0.0,
            counters: OperatorCounters::default(),
        }
    }

    pub fn ingest(&mut self, event: Event, now_ms: f64) -> Result<(), EngineError> {
        if !self.inputs.contains(&event.event_type) {
            return Err(EngineError::UnknownType {
                operator: self.spec.id.to_string(),
                ty: event.event_type,
            });
        }
        *self.counters.arrivals.entry(event.event_type).or_default() += 1;
        self.queue.push_back(Queued {
            event,
            arrived_ms: now_ms,
        });
        Ok(())
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn clock_ms(&self) -> f64 {
        self.clock_ms
    }

    pub fn open_machines(&self) -> usize {
        self.matchers.iter().map(Matcher::open_machines).sum()
    }

    fn draw_cost(&mut self, ptime_us: f64) -> f64 {
        let mean_ms = ptime_us / 1000.0;
        match self.cost {
            CostModel::Deterministic => mean_ms,
            CostModel::Zero => 0.0,
            CostModel::Exponential if mean_ms > 0.0 => Exp::new(1.0 / mean_ms)
                .expect("positive rate")
                .sample(&mut self.cost_rng),
            CostModel::Exponential => 0.0,
        }
    }

    /// Dequeues the head event and runs it through every pattern in order.
    /// The operator is busy from `max(now, clock)` for the summed cost of
    /// the patterns that processed the event.
    pub fn process_next(&mut self, now_ms: f64, config: &ShedderConfig) -> Option<Processed> {
        let Queued { event, arrived_ms } = self.queue.pop_front()?;
        let started_ms = now_ms.max(self.clock_ms);
        self.counters.events += 1;

        let mut pattern_cost_ms = Vec::with_capacity(self.matchers.len());
        let mut matches = Vec::new();
        let mut emitters = Vec::new();
        for i in 0..self.matchers.len() {
            let pid = self.spec.patterns[i].id.clone();
            let keep = should_process(config, pid.as_str(), event.event_type, &mut self.shed_rng);
            let cost = self.draw_cost(self.spec.patterns[i].ptime_us);
            if !keep {
                *self.counters.shed.entry(pid).or_default() += 1;
                pattern_cost_ms.push(None);
                continue;
            }
            *self.counters.processed.entry(pid).or_default() += 1;
            pattern_cost_ms.push(Some(cost));
            if let Some(m) = self.matchers[i].offer(&event) {
                emitters.push(i);
                matches.push(m);
            }
        }
        let cost_ms: f64 = pattern_cost_ms.iter().flatten().sum();
        let done = started_ms + cost_ms;
        self.clock_ms = done;
        self.counters.busy_ms += cost_ms;

        let mut outputs = Vec::new();
        for (&i, m) in emitters.iter().zip(&matches) {
            let p = &self.spec.patterns[i];
            let mut attributes = BTreeMap::new();
            for e in &m.events {
                attributes.extend(e.attributes.iter().map(|(k, v)| (k.clone(), v.clone())));
            }
            for _ in 0..p.f {
                let n = self.counters.emissions.entry(p.id.clone()).or_default();
                *n += 1;
                let mut attrs = attributes.clone();
                attrs.insert("source".to_owned(), Value::Str(format!("{}#{}", p.id, n)));
                outputs.push((
                    i,
                    Event {
                        id: 0,
                        event_type: p.output_type,
                        attributes: attrs,
                        ts: done,
                    },
                ));
            }
        }
        Some(Processed {
            event,
            arrived_ms,
            started_ms,
            cost_ms,
            pattern_cost_ms,
            outputs,
            matches,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PatternAst, PatternSpec};

    fn op() -> OperatorRuntime {
        let spec = OperatorSpec::new(
            "w",
            vec![
                PatternSpec::new("A", PatternAst::seq(&[0, 0, 1]), 5)
                    .ptime(100.0)
                    .multiplier(2),
                PatternSpec::new("B", PatternAst::and(&[1, 2]), 6).ptime(300.0),
            ],
        );
        OperatorRuntime::new(&spec, 1, 0, CostModel::Deterministic)
    }

    #[test]
    fn ingest_counts_and_rejects() {
        let mut w = op();
        assert_eq!(w.queue_len(), 0);
        w.ingest(Event::new(1, TypeId(0), 0.0), 0.0).unwrap();
        assert_eq!(w.queue_len(), 1);
        for i in 0..5 {
            w.ingest(Event::new(i, TypeId(1), 0.0), 0.0).unwrap();
        }
        assert_eq!(w.queue_len(), 6);
        assert!(matches!(
            w.ingest(Event::new(9, TypeId(7), 0.0), 0.0),
            Err(EngineError::UnknownType { .. })
        ));
        assert_eq!(w.queue_len(), 6);
    }

    #[test]
    fn emits_copies_with_tags_and_costs() {
        let mut w = op();
        let mk = |id, ty, ts| Event::new(id, TypeId(ty), ts).with_attribute(&format!("a{id}"), Value::Int(id as i64));
        w.ingest(mk(1, 0, 0.0), 0.0).unwrap();
        w.ingest(mk(2, 0, 1.0), 1.0).unwrap();
        w.ingest(mk(3, 1, 2.0), 2.0).unwrap();
        let c = ShedderConfig::new().with("B", 0, 0.0).unwrap();
        let a = w.process_next(0.0, &c).unwrap();
        // B sheds type 0, so only A's cost counts
        assert_eq!(a.pattern_cost_ms, vec![Some(0.1), None]);
        w.process_next(0.0, &c).unwrap();
        let last = w.process_next(0.0, &c).unwrap();
        assert!((last.started_ms - 0.2).abs() < 1e-12);
        assert!((last.cost_ms - 0.4).abs() < 1e-12);
        assert_eq!(last.outputs.len(), 2);
        let (_, out) = &last.outputs[1];
        assert_eq!(out.event_type, TypeId(5));
        assert_eq!(out.attributes["source"], Value::Str("A#2".into()));
        assert!(["a1", "a2", "a3"].iter().all(|k| out.attributes.contains_key(*k)));
        assert_eq!(out.attributes.len(), 4);
        assert!((w.counters.busy_ms - 0.6).abs() < 1e-12);
        assert_eq!(w.counters.emissions[&PatternId::from("A")], 2);
    }
}
