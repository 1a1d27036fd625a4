//! State-machine pattern matching with windows and consume-once semantics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::model::{Event, PatternAst, PatternId, PatternSpec, TypeId};

#[derive(Debug, Clone)]
enum NodeState {
    Atom {
        ty: TypeId,
        done: bool,
    },
    Seq {
        children: Vec<NodeState>,
        pos: usize,
    },
    And {
        children: Vec<NodeState>,
    },
    /// Commits to the first child that accepts an event.
    Or {
        children: Vec<NodeState>,
        chosen: Option<usize>,
    },
}

impl NodeState {
    fn new(ast: &PatternAst) -> Self {
        let kids = |c: &[PatternAst]| c.iter().map(NodeState::new).collect();
        match ast {
            PatternAst::Atom(ty) => NodeState::Atom { ty: *ty, done: false },
            PatternAst::Seq(c) => NodeState::Seq {
                children: kids(c),
                pos: 0,
            },
            PatternAst::And(c) => NodeState::And { children: kids(c) },
            PatternAst::Or(c) => NodeState::Or {
                children: kids(c),
                chosen: None,
            },
        }
    }

    fn complete(&self) -> bool {
        match self {
            NodeState::Atom { done, .. } => *done,
            NodeState::Seq { children, pos } => *pos == children.len(),
            NodeState::And { children } => children.iter().all(NodeState::complete),
            NodeState::Or { children, chosen } => chosen.is_some_and(|i| children[i].complete()),
        }
    }

    /// Types that [`NodeState::advance`] would accept, possibly repeated.
    fn wants(&self, out: &mut Vec<TypeId>) {
        match self {
            NodeState::Atom { ty, done } => {
                if !*done {
                    out.push(*ty);
                }
            }
            NodeState::Seq { children, pos } => {
                if let Some(c) = children.get(*pos) {
                    c.wants(out);
                }
            }
            NodeState::And { children } => {
                for c in children.iter().filter(|c| !c.complete()) {
                    c.wants(out);
                }
            }
            NodeState::Or { children, chosen } => match chosen {
                Some(i) => children[*i].wants(out),
                None => children.iter().for_each(|c| c.wants(out)),
            },
        }
    }

    /// Consumes an event of type `ty` if some unmet position takes it.
    /// Leaves the state untouched when it returns false.
    fn advance(&mut self, ty: TypeId) -> bool {
        match self {
            NodeState::Atom { ty: want, done } => {
                if !*done && *want == ty {
                    *done = true;
                    true
                } else {
                    false
                }
            }
            NodeState::Seq { children, pos } => {
                let Some(child) = children.get_mut(*pos) else {
                    return false;
                };
                if !child.advance(ty) {
                    return false;
                }
                if child.complete() {
                    *pos += 1;
                }
                true
            }
            NodeState::And { children } => children.iter_mut().any(|c| !c.complete() && c.advance(ty)),
            NodeState::Or { children, chosen } => match chosen {
                Some(i) => children[*i].advance(ty),
                None => match children.iter_mut().position(|c| c.advance(ty)) {
                    Some(i) => {
                        *chosen = Some(i);
                        true
                    }
                    None => false,
                },
            },
        }
    }
}

#[derive(Debug, Clone)]
struct Machine {
    state: NodeState,
    events: Vec<Event>,
    first_ts: f64,
    last_ts: f64,
    /// Types `state` would accept next.
    wants: Vec<TypeId>,
}

/// A completed match: the contributing events in the order consumed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Match {
    pub pattern: PatternId,
    pub events: Vec<Event>,
}

impl Match {
    pub fn span_ms(&self) -> f64 {
        let (lo, hi) = self
            .events
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
                (lo.min(e.ts), hi.max(e.ts))
            });
        hi - lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ts(f64);

impl Eq for Ts {}

impl PartialOrd for Ts {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ts {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Open machines of one pattern. Machines are keyed by creation order, so
/// the smallest key that takes an event is the oldest.
#[derive(Debug, Clone)]
pub struct Matcher {
    pattern: PatternId,
    ast: PatternAst,
    window_ms: f64,
    next_key: u64,
    open: BTreeMap<u64, Machine>,
    by_first: BTreeSet<(Ts, u64)>,
    by_type: BTreeMap<TypeId, BTreeSet<u64>>,
}

impl Matcher {
    pub fn new(spec: &PatternSpec) -> Self {
        Self {
            pattern: spec.id.clone(),
            ast: spec.ast.clone(),
            window_ms: spec.window_ms,
            next_key: 0,
            open: BTreeMap::new(),
            by_first: BTreeSet::new(),
            by_type: BTreeMap::new(),
        }
    }

    pub fn open_machines(&self) -> usize {
        self.open.len()
    }

    fn unindex(&mut self, key: u64) {
        let m = &self.open[&key];
        self.by_first.remove(&(Ts(m.first_ts), key));
        for t in &m.wants {
            if let Some(set) = self.by_type.get_mut(t) {
                set.remove(&key);
            }
        }
    }

    fn index(&mut self, key: u64) {
        let m = &self.open[&key];
        self.by_first.insert((Ts(m.first_ts), key));
        for t in &m.wants {
            self.by_type.entry(*t).or_default().insert(key);
        }
    }

    /// Offers `event` to the oldest machine that takes it, or starts a new
    /// machine with it. Returns the match it completes, if any.
    pub fn offer(&mut self, event: &Event) -> Option<Match> {
        let w = self.window_ms;
        while let Some(&(Ts(first), key)) = self.by_first.first() {
            if event.ts - first <= w {
                break;
            }
            self.unindex(key);
            self.open.remove(&key);
        }

        let ty = event.event_type;
        let slot = self.by_type.get(&ty).and_then(|keys| {
            keys.iter().copied().find(|k| {
                let m = &self.open[k];
                m.last_ts.max(event.ts) - m.first_ts.min(event.ts) <= w
            })
        });
        let key = match slot {
            Some(key) => {
                self.unindex(key);
                let m = self.open.get_mut(&key).expect("indexed");
                let took = m.state.advance(ty);
                debug_assert!(took);
                m.events.push(event.clone());
                m.first_ts = m.first_ts.min(event.ts);
                m.last_ts = m.last_ts.max(event.ts);
                m.wants.clear();
                m.state.wants(&mut m.wants);
                key
            }
            None => {
                let mut state = NodeState::new(&self.ast);
                if !state.advance(ty) {
                    return None;
                }
                let mut wants = Vec::new();
                state.wants(&mut wants);
                let key = self.next_key;
                self.next_key += 1;
                self.open.insert(
                    key,
                    Machine {
                        state,
                        events: vec![event.clone()],
                        first_ts: event.ts,
                        last_ts: event.ts,
                        wants,
                    },
                );
                key
            }
        };
        if !self.open[&key].state.complete() {
            self.index(key);
            return None;
        }
        let m = self.open.remove(&key).expect("present");
        Some(Match {
            pattern: self.pattern.clone(),
            events: m.events,
        })
    }
}
