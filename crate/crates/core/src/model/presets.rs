//! The four-operator example application used by the experiments.
//!
//! ```text
//!  s1 ──> w1 ──Q11──> w3 ──> sink1
//!            ╲    ╱
//!             ╲  ╱ Q21
//!              ╳
//!             ╱  ╲ Q12
//!            ╱    ╲
//!  s2 ──> w2 ──Q22──> w4 ──> sink2
//! ```
//!
//! w1 and w2 run the same two patterns, `seq(0, 0, 1)` and `and(1, 2, 3)`,
//! on their own source. w3 joins the sequence matches of both sides, w4 the
//! conjunction matches. w2 is the one with a latency bound.

use std::collections::BTreeMap;

use super::{Edge, EventType, NodeId, OperatorSpec, PatternAst, PatternSpec, SinkSpec, SourceSpec, Topology, TypeId};

pub const Q11: u32 = 4;
pub const Q12: u32 = 5;
pub const Q21: u32 = 6;
pub const Q22: u32 = 7;
pub const Q31: u32 = 8;
pub const Q41: u32 = 9;

/// Latency bound of w2 in milliseconds.
pub const W2_BOUND_MS: f64 = 50.0;

const WINDOW_MS: f64 = 10_000.0;

fn rates(r: [f64; 4]) -> BTreeMap<TypeId, f64> {
    r.iter().enumerate().map(|(i, &v)| (TypeId(i as u32), v)).collect()
}

/// Both sources emit type 0 at twice the rate of types 1-3, so every
/// pattern at w1 and w2 is equally fed.
pub fn balanced_rates() -> BTreeMap<NodeId, BTreeMap<TypeId, f64>> {
    BTreeMap::from([
        ("s1".into(), rates([2000.0, 1000.0, 1000.0, 1000.0])),
        ("s2".into(), rates([2000.0, 1000.0, 1000.0, 1000.0])),
    ])
}

/// s1 starves its sequence pattern: predicted Q11:Q12 output is 1:10.
pub fn unbalanced_rates() -> BTreeMap<NodeId, BTreeMap<TypeId, f64>> {
    BTreeMap::from([
        ("s1".into(), rates([200.0, 1000.0, 1000.0, 1000.0])),
        ("s2".into(), rates([2000.0, 1000.0, 1000.0, 1000.0])),
    ])
}

pub fn running_example() -> Topology {
    let mut types: Vec<EventType> = (0..4)
        .map(|i| EventType {
            id: TypeId(i),
            name: format!("m{i}"),
        })
        .collect();
    for (id, name) in [
        (Q11, "Q11"),
        (Q12, "Q12"),
        (Q21, "Q21"),
        (Q22, "Q22"),
        (Q31, "Q31"),
        (Q41, "Q41"),
    ] {
        types.push(EventType {
            id: TypeId(id),
            name: name.into(),
        });
    }

    let base = balanced_rates();
    let sources = ["s1", "s2"]
        .into_iter()
        .map(|id| SourceSpec {
            id: id.into(),
            types: (0..4).map(TypeId).collect(),
            rates: base[id].clone(),
        })
        .collect();

    let seq = || PatternAst::seq(&[0, 0, 1]);
    let and = || PatternAst::and(&[1, 2, 3]);
    let operators = vec![
        OperatorSpec::new(
            "w1",
            vec![
                PatternSpec::new("Q11", seq(), Q11).window(WINDOW_MS).ptime(50.0),
                PatternSpec::new("Q12", and(), Q12).window(WINDOW_MS).ptime(50.0),
            ],
        ),
        OperatorSpec::new(
            "w2",
            vec![
                PatternSpec::new("Q21", seq(), Q21).window(WINDOW_MS).ptime(400.0),
                PatternSpec::new("Q22", and(), Q22).window(WINDOW_MS).ptime(500.0),
            ],
        )
        .bound(W2_BOUND_MS),
        OperatorSpec::new(
            "w3",
            vec![PatternSpec::new("Q31", PatternAst::and(&[Q11, Q21]), Q31)
                .window(WINDOW_MS)
                .ptime(50.0)],
        ),
        OperatorSpec::new(
            "w4",
            vec![PatternSpec::new("Q41", PatternAst::and(&[Q12, Q22]), Q41)
                .window(WINDOW_MS)
                .ptime(50.0)],
        ),
    ];

    let edges = vec![
        Edge::new("s1", "w1", &[0, 1, 2, 3]),
        Edge::new("s2", "w2", &[0, 1, 2, 3]),
        Edge::new("w1", "w3", &[Q11]),
        Edge::new("w1", "w4", &[Q12]),
        Edge::new("w2", "w3", &[Q21]),
        Edge::new("w2", "w4", &[Q22]),
        Edge::new("w3", "sink1", &[Q31]),
        Edge::new("w4", "sink2", &[Q41]),
    ];

    Topology {
        types,
        virtual_types: Vec::new(),
        sources,
        operators,
        sinks: vec![
            SinkSpec {
                id: "sink1".into(),
                weight: 1.0,
            },
            SinkSpec {
                id: "sink2".into(),
                weight: 1.0,
            },
        ],
        edges,
    }
}
