//! Per-pattern, per-type probabilistic shedding and the queueing formulas
//! used to decide whether a configuration keeps an operator within its
//! latency bound.
//!
//! Ratios are always processing shares: `r = 1` keeps every event of that
//! type at that pattern, `r = 0` drops all of them.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{NodeId, PatternId, TypeId};

#[derive(Debug, Error, PartialEq)]
pub enum ShedError {
    #[error("ratio {r} for ({pattern}, {ty}) is outside [0, 1]")]
    RatioOutOfRange { pattern: String, ty: TypeId, r: f64 },
    #[error("operator overloaded: arrival rate {lambda}/s >= service rate {mu}/s")]
    Overloaded { lambda: f64, mu: f64 },
    #[error("latency bound must be positive, got {0} s")]
    NonPositiveBound(f64),
    #[error("rates must be non-negative, got {0}")]
    NegativeRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RatioEntry<'a> {
    #[serde(borrow)]
    pattern: &'a str,
    #[serde(rename = "type")]
    ty: TypeId,
    r: f64,
}

/// Processing ratios keyed by (pattern, type). Missing pairs process
/// everything.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShedderConfig {
    ratios: BTreeMap<PatternId, BTreeMap<TypeId, f64>>,
}

impl ShedderConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, pattern: &str, ty: TypeId, r: f64) -> Result<(), ShedError> {
        if !(0.0..=1.0).contains(&r) {
            return Err(ShedError::RatioOutOfRange {
                pattern: pattern.to_owned(),
                ty,
                r,
            });
        }
        self.ratios.entry(pattern.into()).or_default().insert(ty, r);
        Ok(())
    }

    pub fn with(mut self, pattern: &str, ty: u32, r: f64) -> Result<Self, ShedError> {
        self.set(pattern, TypeId(ty), r)?;
        Ok(self)
    }

    pub fn ratio(&self, pattern: &str, ty: TypeId) -> f64 {
        self.ratios
            .get(pattern)
            .and_then(|m| m.get(&ty))
            .copied()
            .unwrap_or(1.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PatternId, TypeId, f64)> {
        self.ratios
            .iter()
            .flat_map(|(p, m)| m.iter().map(move |(&t, &r)| (p, t, r)))
    }

    pub fn len(&self) -> usize {
        self.ratios.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when some pair drops part of its input.
    pub fn is_shedding(&self) -> bool {
        self.iter().any(|(_, _, r)| r < 1.0)
    }

    /// Multiplies every ratio of the given pairs by `factor`, clamping to
    /// [0, 1]. Pairs without an entry start from 1.
    pub fn scaled(&self, pairs: &[(PatternId, TypeId)], factor: f64) -> Self {
        let mut out = self.clone();
        for (p, t) in pairs {
            let r = (self.ratio(p.as_str(), *t) * factor).clamp(0.0, 1.0);
            out.ratios.entry(p.clone()).or_default().insert(*t, r);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ratio entries always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, ShedderJsonError> {
        let entries: Vec<RatioEntry> = serde_json::from_str(text)?;
        let mut c = Self::new();
        for e in entries {
            c.set(e.pattern, e.ty, e.r)?;
        }
        Ok(c)
    }
}

impl Serialize for ShedderConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter().map(|(p, ty, r)| RatioEntry {
            pattern: p.as_str(),
            ty,
            r,
        }))
    }
}

#[derive(Debug, Error)]
pub enum ShedderJsonError {
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Ratio(#[from] ShedError),
}

/// One Bernoulli draw with success probability `r(pattern, ty)`.
///
/// A uniform number is drawn even when the outcome is certain, so the
/// random stream does not depend on the configuration.
pub fn should_process<R: Rng + ?Sized>(config: &ShedderConfig, pattern: &str, ty: TypeId, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    u < config.ratio(pattern, ty)
}

/// Mean time in system of an M/M/1 queue, `1 / (mu - lambda)` seconds.
pub fn sojourn_time(lambda: f64, mu: f64) -> Result<f64, ShedError> {
    if lambda < 0.0 {
        return Err(ShedError::NegativeRate(lambda));
    }
    if lambda >= mu {
        return Err(ShedError::Overloaded { lambda, mu });
    }
    Ok(1.0 / (mu - lambda))
}

/// Largest mean processing time that keeps the sojourn time at `bound_s`
/// under arrival rate `lambda`.
pub fn feasible_ptime(bound_s: f64, lambda: f64) -> Result<f64, ShedError> {
    if !(bound_s > 0.0) {
        return Err(ShedError::NonPositiveBound(bound_s));
    }
    if lambda < 0.0 {
        return Err(ShedError::NegativeRate(lambda));
    }
    Ok(1.0 / (1.0 / bound_s + lambda))
}

/// Measured or predicted state of one operator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorSnapshot {
    /// Arrival rate per type, events/s.
    pub arrivals: BTreeMap<TypeId, f64>,
    /// Mean processing time per pattern in seconds, per processed event.
    pub ptime_s: BTreeMap<PatternId, f64>,
    /// Output rate per pattern, events/s.
    pub outputs: BTreeMap<PatternId, f64>,
    /// Service rate, events/s. `None` when nothing has been measured.
    pub mu: Option<f64>,
}

impl OperatorSnapshot {
    pub fn lambda(&self) -> f64 {
        self.arrivals.values().sum()
    }

    pub fn rho(&self) -> Option<f64> {
        self.mu.map(|mu| self.lambda() / mu)
    }
}

/// Stream characteristics of the whole graph at one point in time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t_ms: f64,
    pub sources: BTreeMap<NodeId, BTreeMap<TypeId, f64>>,
    pub operators: BTreeMap<NodeId, OperatorSnapshot>,
}

impl Snapshot {
    pub fn operator(&self, id: &str) -> Option<&OperatorSnapshot> {
        self.operators.get(id)
    }
}

/// Mean processing time per event at `operator` under `config`: each type
/// contributes its share of the arrivals times the cost of every pattern it
/// is processed at. Zero for an idle operator.
pub fn avg_ptime(config: &ShedderConfig, snapshot: &Snapshot, operator: &str) -> f64 {
    let Some(op) = snapshot.operator(operator) else {
        return 0.0;
    };
    avg_ptime_op(config, op)
}

pub fn avg_ptime_op(config: &ShedderConfig, op: &OperatorSnapshot) -> f64 {
    let lambda = op.lambda();
    if lambda <= 0.0 {
        return 0.0;
    }
    op.arrivals
        .iter()
        .map(|(&t, &lt)| {
            let per_type: f64 = op.ptime_s.iter().map(|(p, &pt)| config.ratio(p.as_str(), t) * pt).sum();
            lt / lambda * per_type
        })
        .sum()
}

/// Whether `config` keeps `operator` stable and within `bound_s`.
pub fn is_feasible(
    config: &ShedderConfig,
    snapshot: &Snapshot,
    operator: &str,
    bound_s: f64,
) -> Result<bool, ShedError> {
    let lambda = snapshot.operator(operator).map_or(0.0, OperatorSnapshot::lambda);
    let p_star = feasible_ptime(bound_s, lambda)?;
    let p = avg_ptime(config, snapshot, operator);
    Ok(p <= p_star && lambda * p < 1.0)
}
