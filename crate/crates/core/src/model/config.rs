//! TOML topology files.
//!
//! ```toml
//! [types]
//! 0 = "m0"
//! 4 = "Q11"
//!
//! [sources.s1]
//! types = [0]
//! rates = { 0 = 100.0 }
//!
//! [operators.w1]
//! latency_bound_ms = 50.0
//!
//! [operators.w1.patterns.Q11]
//! ast = "(seq (atom 0) (atom 0) (atom 1))"
//! window_ms = 10000
//! output_type = 4
//! ptime_us = 50.0
//!
//! [sinks.sink1]
//! weight = 1.0
//!
//! [[edges]]
//! from = "s1"
//! to = "w1"
//! types = [0]
//! ```
//!
//! Types may be referenced by id or by name. A property atom
//! `(atom 0 stock IBM)` allocates a virtual type that every source emitting
//! the base type also emits, and every edge carrying the base type also
//! carries.

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use serde::Deserialize;
use thiserror::Error;

use super::sexpr::{parse_pattern, AtomRef, SexprError};
use super::{Edge, EventType, OperatorSpec, PatternSpec, SinkSpec, SourceSpec, Topology, TypeId, VirtualType};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing topology: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("type key `{0}` is not a non-negative integer")]
    TypeKey(String),
    #[error("unknown type reference `{0}`")]
    UnknownType(String),
    #[error("pattern `{pattern}`: {source}")]
    Pattern { pattern: String, source: SexprError },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TypeRef {
    Id(u32),
    Name(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTopology {
    types: IndexMap<String, String>,
    #[serde(default)]
    sources: IndexMap<String, RawSource>,
    #[serde(default)]
    operators: IndexMap<String, RawOperator>,
    #[serde(default)]
    sinks: IndexMap<String, RawSink>,
    #[serde(default)]
    edges: Vec<RawEdge>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSource {
    types: Vec<TypeRef>,
    #[serde(default)]
    rates: IndexMap<String, f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOperator {
    latency_bound_ms: Option<f64>,
    service_rate_hint: Option<f64>,
    #[serde(default)]
    patterns: IndexMap<String, RawPattern>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPattern {
    ast: String,
    window_ms: f64,
    output_type: TypeRef,
    #[serde(default = "default_f")]
    f: u32,
    ptime_us: f64,
}

fn default_f() -> u32 {
    1
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSink {
    #[serde(default = "default_weight")]
    weight: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    from: String,
    to: String,
    types: Vec<TypeRef>,
}

struct TypeTable {
    types: Vec<EventType>,
    virtuals: Vec<VirtualType>,
}

impl TypeTable {
    fn lookup(&self, r: &str) -> Result<TypeId, ConfigError> {
        if let Ok(id) = r.parse::<u32>() {
            if self.types.iter().any(|t| t.id.0 == id) {
                return Ok(TypeId(id));
            }
        }
        self.types
            .iter()
            .find(|t| t.name == r)
            .map(|t| t.id)
            .ok_or_else(|| ConfigError::UnknownType(r.to_owned()))
    }

    /// Numeric references to undeclared ids are passed through so that
    /// validation can report them with a proper diagnostic.
    fn lookup_ref(&self, r: &TypeRef) -> Result<TypeId, ConfigError> {
        match r {
            TypeRef::Id(id) => Ok(TypeId(*id)),
            TypeRef::Name(n) => n.parse::<u32>().map(TypeId).or_else(|_| self.lookup(n)),
        }
    }

    fn resolve_atom(&mut self, a: &AtomRef) -> Result<TypeId, ConfigError> {
        let base = match a.ty.parse::<u32>() {
            Ok(id) => TypeId(id),
            Err(_) => self.lookup(&a.ty)?,
        };
        let Some((attr, value)) = &a.property else {
            return Ok(base);
        };
        if let Some(v) = self
            .virtuals
            .iter()
            .find(|v| v.base == base && &v.attribute == attr && &v.value == value)
        {
            return Ok(v.id);
        }
        let base_name = self
            .types
            .iter()
            .find(|t| t.id == base)
            .map(|t| t.name.clone())
            .ok_or_else(|| ConfigError::UnknownType(a.ty.clone()))?;
        let id = TypeId(self.types.iter().map(|t| t.id.0 + 1).max().unwrap_or(0));
        self.types.push(EventType {
            id,
            name: format!("{base_name}.{attr}={value}"),
        });
        self.virtuals.push(VirtualType {
            id,
            base,
            attribute: attr.clone(),
            value: value.clone(),
        });
        Ok(id)
    }
}

pub fn parse_topology(text: &str) -> Result<Topology, ConfigError> {
    let raw: RawTopology = toml::from_str(text)?;
    let mut table = TypeTable {
        types: raw
            .types
            .iter()
            .map(|(k, name)| {
                k.parse::<u32>()
                    .map(|id| EventType {
                        id: TypeId(id),
                        name: name.clone(),
                    })
                    .map_err(|_| ConfigError::TypeKey(k.clone()))
            })
            .collect::<Result<_, _>>()?,
        virtuals: Vec::new(),
    };

    let mut operators = Vec::new();
    for (op_id, op) in &raw.operators {
        let mut patterns = Vec::new();
        for (pid, p) in &op.patterns {
            let ast = parse_pattern(&p.ast).map_err(|source| ConfigError::Pattern {
                pattern: pid.clone(),
                source,
            })?;
            let ast = ast.resolve(&mut |a| table.resolve_atom(a))?;
            patterns.push(PatternSpec {
                id: pid.as_str().into(),
                ast,
                window_ms: p.window_ms,
                output_type: table.lookup_ref(&p.output_type)?,
                f: p.f,
                ptime_us: p.ptime_us,
            });
        }
        operators.push(OperatorSpec {
            id: op_id.as_str().into(),
            patterns,
            latency_bound_ms: op.latency_bound_ms,
            service_rate_hint: op.service_rate_hint,
        });
    }

    let with_virtuals = |types: Vec<TypeId>| -> Vec<TypeId> {
        let mut out = types.clone();
        for v in &table.virtuals {
            if types.contains(&v.base) && !out.contains(&v.id) {
                out.push(v.id);
            }
        }
        out
    };

    let mut sources = Vec::new();
    for (id, s) in &raw.sources {
        let types = s
            .types
            .iter()
            .map(|r| table.lookup_ref(r))
            .collect::<Result<Vec<_>, _>>()?;
        let rates = s
            .rates
            .iter()
            .map(|(k, v)| table.lookup(k).map(|t| (t, *v)))
            .collect::<Result<BTreeMap<_, _>, _>>()?;
        sources.push(SourceSpec {
            id: id.as_str().into(),
            types: with_virtuals(types),
            rates,
        });
    }

    let edges = raw
        .edges
        .iter()
        .map(|e| {
            let types = e
                .types
                .iter()
                .map(|r| table.lookup_ref(r))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Edge {
                from: e.from.as_str().into(),
                to: e.to.as_str().into(),
                types: with_virtuals(types),
            })
        })
        .collect::<Result<Vec<_>, ConfigError>>()?;

    let sinks = raw
        .sinks
        .iter()
        .map(|(id, s)| SinkSpec {
            id: id.as_str().into(),
            weight: s.weight,
        })
        .collect();

    Ok(Topology {
        types: table.types,
        virtual_types: table.virtuals,
        sources,
        operators,
        sinks,
        edges,
    })
}

pub fn load_topology(path: impl AsRef<Path>) -> Result<Topology, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_topology(&text)
}
