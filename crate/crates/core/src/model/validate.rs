use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use super::{NodeKind, PatternAst, Topology, TypeId};

/// Stable diagnostic codes; the string form is part of the CLI output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationCode {
    DuplicateType,
    DuplicateNode,
    DuplicatePattern,
    UnknownType,
    UnknownNode,
    Cycle,
    EmptyOperator,
    Arity,
    Window,
    Multiplier,
    Ptime,
    SelfLoop,
    AtomNotDelivered,
    EdgeTypeNotProduced,
    EdgeTypeNotConsumed,
    EdgeIntoSource,
    EdgeFromSink,
    SinkWithoutInput,
    SinkWeight,
    OrphanType,
    NegativeRate,
    Bound,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::DuplicateType => "duplicate-type",
            Self::DuplicateNode => "duplicate-node",
            Self::DuplicatePattern => "duplicate-pattern",
            Self::UnknownType => "unknown-type",
            Self::UnknownNode => "unknown-node",
            Self::Cycle => "cycle",
            Self::EmptyOperator => "empty-operator",
            Self::Arity => "arity",
            Self::Window => "window",
            Self::Multiplier => "multiplier",
            Self::Ptime => "ptime",
            Self::SelfLoop => "self-loop",
            Self::AtomNotDelivered => "atom-not-delivered",
            Self::EdgeTypeNotProduced => "edge-type-not-produced",
            Self::EdgeTypeNotConsumed => "edge-type-not-consumed",
            Self::EdgeIntoSource => "edge-into-source",
            Self::EdgeFromSink => "edge-from-sink",
            Self::SinkWithoutInput => "sink-without-input",
            Self::SinkWeight => "sink-weight",
            Self::OrphanType => "orphan-type",
            Self::NegativeRate => "negative-rate",
            Self::Bound => "bound",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub code: ViolationCode,
    /// Node, pattern or type the violation is about.
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.code, self.subject, self.message)
    }
}

struct Collector(Vec<Violation>);

impl Collector {
    fn push(&mut self, code: ViolationCode, subject: impl fmt::Display, message: impl Into<String>) {
        self.0.push(Violation {
            code,
            subject: subject.to_string(),
            message: message.into(),
        });
    }
}

/// Checks every structural invariant of a topology. An empty result means
/// the topology is usable by the simulator and the planner.
pub fn validate(t: &Topology) -> Vec<Violation> {
    let mut out = Collector(Vec::new());
    let declared: BTreeSet<TypeId> = t.types.iter().map(|e| e.id).collect();
    check_types(t, &mut out);
    check_ids(t, &mut out);

    for s in &t.sources {
        for ty in &s.types {
            if !declared.contains(ty) {
                out.push(ViolationCode::UnknownType, &s.id, format!("emits undeclared type {ty}"));
            }
        }
        for (ty, rate) in &s.rates {
            if !(*rate >= 0.0) || !rate.is_finite() {
                out.push(ViolationCode::NegativeRate, &s.id, format!("rate {rate} for type {ty}"));
            }
            if !s.types.contains(ty) {
                out.push(
                    ViolationCode::UnknownType,
                    &s.id,
                    format!("rate given for type {ty} it does not emit"),
                );
            }
        }
    }

    for op in &t.operators {
        if op.patterns.is_empty() {
            out.push(ViolationCode::EmptyOperator, &op.id, "operator has no patterns");
        }
        if let Some(b) = op.latency_bound_ms {
            if !(b > 0.0) {
                out.push(
                    ViolationCode::Bound,
                    &op.id,
                    format!("latency bound {b} ms is not positive"),
                );
            }
        }
        if let Some(mu) = op.service_rate_hint {
            if !(mu > 0.0) {
                out.push(
                    ViolationCode::Bound,
                    &op.id,
                    format!("service rate hint {mu} is not positive"),
                );
            }
        }
        for p in &op.patterns {
            check_arity(&p.ast, p.id.as_str(), &mut out);
            for ty in p.ast.atom_types() {
                if !declared.contains(&ty) {
                    out.push(
                        ViolationCode::UnknownType,
                        &p.id,
                        format!("atom references undeclared type {ty}"),
                    );
                } else if t.producers_of(op.id.as_str(), ty).is_empty() {
                    out.push(
                        ViolationCode::AtomNotDelivered,
                        &p.id,
                        format!("no edge delivers type {ty} to {}", op.id),
                    );
                }
            }
            if !(p.window_ms > 0.0) {
                out.push(
                    ViolationCode::Window,
                    &p.id,
                    format!("window {} ms is not positive", p.window_ms),
                );
            }
            if p.f < 1 {
                out.push(ViolationCode::Multiplier, &p.id, "output multiplier must be at least 1");
            }
            if !(p.ptime_us > 0.0) {
                out.push(
                    ViolationCode::Ptime,
                    &p.id,
                    format!("processing time {} us is not positive", p.ptime_us),
                );
            }
            if !declared.contains(&p.output_type) {
                out.push(
                    ViolationCode::UnknownType,
                    &p.id,
                    format!("output type {} is undeclared", p.output_type),
                );
            }
            if p.ast.atom_types().contains(&p.output_type) {
                out.push(
                    ViolationCode::SelfLoop,
                    &p.id,
                    format!("output type {} is also an input", p.output_type),
                );
            }
        }
    }

    check_edges(t, &declared, &mut out);

    for s in &t.sinks {
        if !(s.weight > 0.0) {
            out.push(
                ViolationCode::SinkWeight,
                &s.id,
                format!("weight {} is not positive", s.weight),
            );
        }
        if t.edges_into(s.id.as_str()).next().is_none() {
            out.push(ViolationCode::SinkWithoutInput, &s.id, "sink has no incoming edge");
        }
    }

    let produced: BTreeSet<TypeId> = t
        .sources
        .iter()
        .flat_map(|s| s.types.iter().copied())
        .chain(t.operators.iter().flat_map(|o| o.output_types()))
        .collect();
    for ty in &t.types {
        if !produced.contains(&ty.id) {
            out.push(
                ViolationCode::OrphanType,
                ty.id,
                format!(
                    "type `{}` is neither emitted by a source nor produced by a pattern",
                    ty.name
                ),
            );
        }
    }

    if let Err(e) = t.topological_order() {
        out.push(ViolationCode::Cycle, "topology", e.to_string());
    }
    out.0
}

fn check_types(t: &Topology, out: &mut Collector) {
    let mut seen = BTreeSet::new();
    for ty in &t.types {
        if !seen.insert(ty.id) {
            out.push(
                ViolationCode::DuplicateType,
                ty.id,
                format!("type id {} declared twice", ty.id),
            );
        }
    }
}

fn check_ids(t: &Topology, out: &mut Collector) {
    let mut nodes = BTreeSet::new();
    let ids = t
        .sources
        .iter()
        .map(|s| &s.id)
        .chain(t.operators.iter().map(|o| &o.id))
        .chain(t.sinks.iter().map(|s| &s.id));
    for id in ids {
        if !nodes.insert(id.as_str()) {
            out.push(ViolationCode::DuplicateNode, id, "node id used twice");
        }
    }
    let mut patterns = BTreeSet::new();
    for p in t.operators.iter().flat_map(|o| &o.patterns) {
        if !patterns.insert(p.id.as_str()) {
            out.push(ViolationCode::DuplicatePattern, &p.id, "pattern id used twice");
        }
    }
}

fn check_arity(ast: &PatternAst, subject: &str, out: &mut Collector) {
    if !matches!(ast, PatternAst::Atom(_)) && ast.children().len() < 2 {
        out.push(
            ViolationCode::Arity,
            subject,
            format!("`{ast}` needs at least two children"),
        );
    }
    for c in ast.children() {
        check_arity(c, subject, out);
    }
}

fn check_edges(t: &Topology, declared: &BTreeSet<TypeId>, out: &mut Collector) {
    for e in &t.edges {
        let subject = format!("{}->{}", e.from, e.to);
        let from = t.node_kind(e.from.as_str());
        let to = t.node_kind(e.to.as_str());
        match from {
            None => out.push(
                ViolationCode::UnknownNode,
                &subject,
                format!("unknown producer `{}`", e.from),
            ),
            Some(NodeKind::Sink(_)) => out.push(ViolationCode::EdgeFromSink, &subject, "sinks cannot emit"),
            _ => {}
        }
        match to {
            None => out.push(
                ViolationCode::UnknownNode,
                &subject,
                format!("unknown consumer `{}`", e.to),
            ),
            Some(NodeKind::Source(_)) => out.push(ViolationCode::EdgeIntoSource, &subject, "sources cannot consume"),
            _ => {}
        }
        for ty in &e.types {
            if !declared.contains(ty) {
                out.push(
                    ViolationCode::UnknownType,
                    &subject,
                    format!("edge carries undeclared type {ty}"),
                );
                continue;
            }
            let produced = match from {
                Some(NodeKind::Source(i)) => t.sources[i].types.contains(ty),
                Some(NodeKind::Operator(i)) => t.operators[i].output_types().contains(ty),
                _ => true,
            };
            if !produced {
                out.push(
                    ViolationCode::EdgeTypeNotProduced,
                    &subject,
                    format!("`{}` does not produce type {ty}", e.from),
                );
            }
            if let Some(NodeKind::Operator(i)) = to {
                if !t.operators[i].input_types().contains(ty) {
                    out.push(
                        ViolationCode::EdgeTypeNotConsumed,
                        &subject,
                        format!("`{}` does not consume type {ty}", e.to),
                    );
                }
            }
        }
    }
}
