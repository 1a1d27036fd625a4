//! Events, pattern trees, operators and the operator-graph topology.
//!
//! A [`Topology`] is immutable once built. Property predicates on atoms
//! (`type = T and attr = value`) are expanded into virtual types when a
//! topology is loaded, so everything downstream only deals with plain
//! [`TypeId`]s.

mod config;
pub mod presets;
mod sexpr;
mod validate;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{load_topology, parse_topology, ConfigError};
pub use sexpr::{parse_pattern, SexprError};
pub use validate::{validate, Violation, ViolationCode};

/// Identifier of an event type. Small integers, unique within a topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TypeId(pub u32);

impl fmt::Display for TypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }

        impl std::borrow::Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }
    };
}

string_id!(
    /// Identifier of a source, operator or sink. All three share one namespace.
    NodeId
);
string_id!(
    /// Identifier of a pattern; unique across the whole graph.
    PatternId
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventType {
    pub id: TypeId,
    pub name: String,
}

/// A type produced by expanding a closed-set property predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualType {
    pub id: TypeId,
    pub base: TypeId,
    pub attribute: String,
    pub value: String,
}

/// Scalar attribute value carried in an event payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Str(v) => f.write_str(v),
        }
    }
}

/// A typed, timestamped tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: u64,
    pub event_type: TypeId,
    pub attributes: BTreeMap<String, Value>,
    /// Virtual time in milliseconds.
    pub ts: f64,
}

impl Event {
    pub fn new(id: u64, event_type: TypeId, ts: f64) -> Self {
        Self {
            id,
            event_type,
            attributes: BTreeMap::new(),
            ts,
        }
    }

    pub fn with_attribute(mut self, key: &str, value: Value) -> Self {
        self.attributes.insert(key.to_owned(), value);
        self
    }
}

/// Pattern tree over atoms. Atoms compare the event type only; property
/// predicates have already been folded into virtual types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternAst {
    Atom(TypeId),
    Seq(Vec<PatternAst>),
    And(Vec<PatternAst>),
    Or(Vec<PatternAst>),
}

impl PatternAst {
    pub fn atom(t: u32) -> Self {
        PatternAst::Atom(TypeId(t))
    }

    pub fn seq(types: &[u32]) -> Self {
        PatternAst::Seq(types.iter().map(|&t| Self::atom(t)).collect())
    }

    pub fn and(types: &[u32]) -> Self {
        PatternAst::And(types.iter().map(|&t| Self::atom(t)).collect())
    }

    pub fn or(types: &[u32]) -> Self {
        PatternAst::Or(types.iter().map(|&t| Self::atom(t)).collect())
    }

    pub fn children(&self) -> &[PatternAst] {
        match self {
            PatternAst::Atom(_) => &[],
            PatternAst::Seq(c) | PatternAst::And(c) | PatternAst::Or(c) => c,
        }
    }

    /// Distinct atom types anywhere in the tree.
    pub fn atom_types(&self) -> BTreeSet<TypeId> {
        let mut out = BTreeSet::new();
        self.collect_types(&mut out);
        out
    }

    fn collect_types(&self, out: &mut BTreeSet<TypeId>) {
        match self {
            PatternAst::Atom(t) => {
                out.insert(*t);
            }
            _ => self.children().iter().for_each(|c| c.collect_types(out)),
        }
    }

    pub fn or_count(&self) -> usize {
        let own = usize::from(matches!(self, PatternAst::Or(_)));
        own + self.children().iter().map(PatternAst::or_count).sum::<usize>()
    }
}

impl fmt::Display for PatternAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kw, children) = match self {
            PatternAst::Atom(t) => return write!(f, "(atom {t})"),
            PatternAst::Seq(c) => ("seq", c),
            PatternAst::And(c) => ("and", c),
            PatternAst::Or(c) => ("or", c),
        };
        write!(f, "({kw}")?;
        for c in children {
            write!(f, " {c}")?;
        }
        f.write_str(")")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub id: PatternId,
    pub ast: PatternAst,
    pub window_ms: f64,
    pub output_type: TypeId,
    /// Outputs emitted per completed match.
    pub f: u32,
    /// Nominal processing cost of one event at this pattern, in microseconds.
    pub ptime_us: f64,
}

impl PatternSpec {
    pub fn new(id: &str, ast: PatternAst, output_type: u32) -> Self {
        Self {
            id: id.into(),
            ast,
            window_ms: 10_000.0,
            output_type: TypeId(output_type),
            f: 1,
            ptime_us: 100.0,
        }
    }

    pub fn window(mut self, window_ms: f64) -> Self {
        self.window_ms = window_ms;
        self
    }

    pub fn ptime(mut self, ptime_us: f64) -> Self {
        self.ptime_us = ptime_us;
        self
    }

    pub fn multiplier(mut self, f: u32) -> Self {
        self.f = f;
        self
    }

    /// Nominal processing time in seconds.
    pub fn ptime_s(&self) -> f64 {
        self.ptime_us * 1e-6
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub id: NodeId,
    /// Applied to every incoming event in this order.
    pub patterns: Vec<PatternSpec>,
    pub latency_bound_ms: Option<f64>,
    /// Overrides the measured processing rate (events/s) when set.
    pub service_rate_hint: Option<f64>,
}

impl OperatorSpec {
    pub fn new(id: &str, patterns: Vec<PatternSpec>) -> Self {
        Self {
            id: id.into(),
            patterns,
            latency_bound_ms: None,
            service_rate_hint: None,
        }
    }

    pub fn bound(mut self, latency_bound_ms: f64) -> Self {
        self.latency_bound_ms = Some(latency_bound_ms);
        self
    }

    pub fn input_types(&self) -> BTreeSet<TypeId> {
        self.patterns.iter().flat_map(|p| p.ast.atom_types()).collect()
    }

    pub fn output_types(&self) -> BTreeSet<TypeId> {
        self.patterns.iter().map(|p| p.output_type).collect()
    }

    pub fn pattern_index(&self, id: &str) -> Option<usize> {
        self.patterns.iter().position(|p| p.id.as_str() == id)
    }

    /// Nominal cost of one event processed at every pattern, in seconds.
    pub fn full_ptime_s(&self) -> f64 {
        self.patterns.iter().map(PatternSpec::ptime_s).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub id: NodeId,
    pub types: Vec<TypeId>,
    /// Default emission rate per type in events/s.
    pub rates: BTreeMap<TypeId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkSpec {
    pub id: NodeId,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    pub types: Vec<TypeId>,
}

impl Edge {
    pub fn new(from: &str, to: &str, types: &[u32]) -> Self {
        Self {
            from: from.into(),
            to: to.into(),
            types: types.iter().map(|&t| TypeId(t)).collect(),
        }
    }

    pub fn carries(&self, t: TypeId) -> bool {
        self.types.contains(&t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Source(usize),
    Operator(usize),
    Sink(usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("unknown pattern `{0}`")]
    UnknownPattern(String),
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error("topology contains a cycle through `{0}`")]
    Cycle(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub types: Vec<EventType>,
    pub virtual_types: Vec<VirtualType>,
    pub sources: Vec<SourceSpec>,
    pub operators: Vec<OperatorSpec>,
    pub sinks: Vec<SinkSpec>,
    pub edges: Vec<Edge>,
}

impl Topology {
    pub fn node_kind(&self, id: &str) -> Option<NodeKind> {
        if let Some(i) = self.sources.iter().position(|s| s.id.as_str() == id) {
            return Some(NodeKind::Source(i));
        }
        if let Some(i) = self.operators.iter().position(|o| o.id.as_str() == id) {
            return Some(NodeKind::Operator(i));
        }
        self.sinks.iter().position(|s| s.id.as_str() == id).map(NodeKind::Sink)
    }

    pub fn operator(&self, id: &str) -> Option<&OperatorSpec> {
        self.operators.iter().find(|o| o.id.as_str() == id)
    }

    pub fn operator_index(&self, id: &str) -> Option<usize> {
        self.operators.iter().position(|o| o.id.as_str() == id)
    }

    /// The pattern and the operator hosting it.
    pub fn pattern(&self, id: &str) -> Option<(&OperatorSpec, &PatternSpec)> {
        self.operators
            .iter()
            .find_map(|o| o.patterns.iter().find(|p| p.id.as_str() == id).map(|p| (o, p)))
    }

    pub fn type_name(&self, t: TypeId) -> Option<&str> {
        self.types.iter().find(|e| e.id == t).map(|e| e.name.as_str())
    }

    pub fn has_type(&self, t: TypeId) -> bool {
        self.types.iter().any(|e| e.id == t)
    }

    pub fn edges_from<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.from.as_str() == node)
    }

    pub fn edges_into<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.to.as_str() == node)
    }

    /// Producers delivering type `t` into `node`, one entry per edge.
    pub fn producers_of<'a>(&'a self, node: &'a str, t: TypeId) -> Vec<&'a NodeId> {
        self.edges_into(node)
            .filter(|e| e.carries(t))
            .map(|e| &e.from)
            .collect()
    }

    /// Maps a raw event to its virtual type when one of its attributes
    /// matches an expanded property predicate.
    pub fn classify(&self, base: TypeId, attributes: &BTreeMap<String, Value>) -> TypeId {
        self.virtual_types
            .iter()
            .find(|v| {
                v.base == base
                    && attributes
                        .get(&v.attribute)
                        .is_some_and(|val| val.to_string() == v.value)
            })
            .map_or(base, |v| v.id)
    }

    /// Nodes directly consuming the output type of `pattern_id`, sinks included.
    pub fn successors(&self, pattern_id: &str) -> Result<BTreeSet<NodeId>, TopologyError> {
        let (op, pattern) = self
            .pattern(pattern_id)
            .ok_or_else(|| TopologyError::UnknownPattern(pattern_id.to_owned()))?;
        Ok(self
            .edges_from(op.id.as_str())
            .filter(|e| e.carries(pattern.output_type))
            .map(|e| e.to.clone())
            .collect())
    }

    /// Operators reachable from `operator_id`, excluding itself and sinks.
    pub fn transitive_successors(&self, operator_id: &str) -> Result<BTreeSet<NodeId>, TopologyError> {
        if self.operator(operator_id).is_none() {
            return Err(TopologyError::UnknownOperator(operator_id.to_owned()));
        }
        let mut seen = BTreeSet::new();
        let mut stack = vec![operator_id.to_owned()];
        while let Some(node) = stack.pop() {
            for e in self.edges_from(&node) {
                if matches!(self.node_kind(e.to.as_str()), Some(NodeKind::Operator(_)))
                    && e.to.as_str() != operator_id
                    && seen.insert(e.to.clone())
                {
                    stack.push(e.to.0.clone());
                }
            }
        }
        Ok(seen)
    }

    /// Kahn ordering over all nodes; ties broken by declaration order
    /// (sources, then operators, then sinks).
    pub fn topological_order(&self) -> Result<Vec<NodeId>, TopologyError> {
        let nodes: Vec<&NodeId> = self
            .sources
            .iter()
            .map(|s| &s.id)
            .chain(self.operators.iter().map(|o| &o.id))
            .chain(self.sinks.iter().map(|s| &s.id))
            .collect();
        let index: BTreeMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut indegree = vec![0usize; nodes.len()];
        let mut adj = vec![Vec::new(); nodes.len()];
        for e in &self.edges {
            if let (Some(&a), Some(&b)) = (index.get(e.from.as_str()), index.get(e.to.as_str())) {
                adj[a].push(b);
                indegree[b] += 1;
            }
        }
        let mut ready: VecDeque<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(nodes.len());
        while let Some(i) = ready.pop_front() {
            order.push(nodes[i].clone());
            for &j in &adj[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.push_back(j);
                }
            }
        }
        if order.len() != nodes.len() {
            let stuck = (0..nodes.len()).find(|&i| indegree[i] > 0).unwrap_or(0);
            return Err(TopologyError::Cycle(nodes[stuck].0.clone()));
        }
        Ok(order)
    }

    /// Operators in topological order.
    pub fn operator_order(&self) -> Result<Vec<usize>, TopologyError> {
        Ok(self
            .topological_order()?
            .iter()
            .filter_map(|n| self.operator_index(n.as_str()))
            .collect())
    }

    /// Default per-source rates declared in the topology.
    pub fn default_rates(&self) -> BTreeMap<NodeId, BTreeMap<TypeId, f64>> {
        self.sources.iter().map(|s| (s.id.clone(), s.rates.clone())).collect()
    }

    /// Operators whose latency bound is set.
    pub fn bounded_operators(&self) -> impl Iterator<Item = &OperatorSpec> {
        self.operators.iter().filter(|o| o.latency_bound_ms.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reachable_by_dfs(t: &Topology, from: &str) -> BTreeSet<String> {
        // plain recursive DFS over the raw edge list
        fn go(t: &Topology, n: &str, acc: &mut BTreeSet<String>) {
            for e in &t.edges {
                if e.from.as_str() == n && t.operator(e.to.as_str()).is_some() && acc.insert(e.to.0.clone()) {
                    go(t, e.to.as_str(), acc);
                }
            }
        }
        let mut acc = BTreeSet::new();
        go(t, from, &mut acc);
        acc.remove(from);
        acc
    }

    fn names(set: BTreeSet<NodeId>) -> Vec<String> {
        set.into_iter().map(|n| n.0).collect()
    }

    #[test]
    fn successors_in_running_example() {
        let t = presets::running_example();
        assert_eq!(names(t.successors("Q21").unwrap()), ["w3"]);
        assert_eq!(names(t.successors("Q22").unwrap()), ["w4"]);
        assert_eq!(names(t.successors("Q31").unwrap()), ["sink1"]);
        assert_eq!(t.successors("nope"), Err(TopologyError::UnknownPattern("nope".into())));
    }

    #[test]
    fn unconsumed_pattern_has_no_successors() {
        let mut t = presets::running_example();
        t.edges.retain(|e| !(e.from.as_str() == "w2" && e.to.as_str() == "w4"));
        assert!(t.successors("Q22").unwrap().is_empty());
    }

    #[test]
    fn transitive_successors_in_running_example() {
        let t = presets::running_example();
        assert_eq!(names(t.transitive_successors("w2").unwrap()), ["w3", "w4"]);
        assert_eq!(names(t.transitive_successors("w1").unwrap()), ["w3", "w4"]);
        assert!(t.transitive_successors("w3").unwrap().is_empty());
        assert!(t.transitive_successors("sink1").is_err());
        for op in &t.operators {
            let got: BTreeSet<String> = t
                .transitive_successors(op.id.as_str())
                .unwrap()
                .into_iter()
                .map(|n| n.0)
                .collect();
            assert_eq!(got, reachable_by_dfs(&t, op.id.as_str()));
        }
    }

    #[test]
    fn topological_order_puts_producers_first() {
        let t = presets::running_example();
        let order = t.topological_order().unwrap();
        let pos = |n: &str| order.iter().position(|x| x.as_str() == n).unwrap();
        for e in &t.edges {
            assert!(pos(e.from.as_str()) < pos(e.to.as_str()));
        }
    }

    #[test]
    fn classify_maps_property_to_virtual_type() {
        let mut t = Topology::default();
        t.types.push(EventType {
            id: TypeId(0),
            name: "stock".into(),
        });
        t.types.push(EventType {
            id: TypeId(1),
            name: "stock.sym=IBM".into(),
        });
        t.virtual_types.push(VirtualType {
            id: TypeId(1),
            base: TypeId(0),
            attribute: "sym".into(),
            value: "IBM".into(),
        });
        let ibm = Event::new(0, TypeId(0), 0.0).with_attribute("sym", Value::Str("IBM".into()));
        let other = Event::new(1, TypeId(0), 0.0).with_attribute("sym", Value::Str("AAPL".into()));
        assert_eq!(t.classify(TypeId(0), &ibm.attributes), TypeId(1));
        assert_eq!(t.classify(TypeId(0), &other.attributes), TypeId(0));
    }

    #[test]
    fn display_round_trips_through_parser() {
        let ast = PatternAst::Seq(vec![
            PatternAst::atom(0),
            PatternAst::And(vec![PatternAst::atom(1), PatternAst::atom(2)]),
            PatternAst::or(&[3, 4]),
        ]);
        let text = ast.to_string();
        assert_eq!(text, "(seq (atom 0) (and (atom 1) (atom 2)) (or (atom 3) (atom 4)))");
        let parsed = parse_pattern(&text).unwrap();
        assert_eq!(parsed.to_plain_ast().unwrap(), ast);
    }
}
