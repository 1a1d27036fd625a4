use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::trace::{ingest_trace, Trace, TraceFile};
use super::HarnessError;
use crate::engine::{ArrivalProcess, Arrivals, RatePhase, SourceRates};
use crate::model::{presets, NodeId, Topology, TypeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadMode {
    BalancedSynthetic,
    UnbalancedSynthetic,
    Trace,
}

/// From `at_ms` on, every base rate is multiplied by `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub at_ms: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    /// Empty means the bundled sample.
    #[serde(default)]
    pub paths: Vec<PathBuf>,
    /// Milliseconds per timestamp unit; borg timestamps are microseconds.
    #[serde(default = "default_time_unit")]
    pub time_unit_ms: f64,
    #[serde(default = "default_types")]
    pub types: u32,
}

fn default_time_unit() -> f64 {
    0.001
}

fn default_types() -> u32 {
    4
}

fn default_duration() -> f64 {
    60_000.0
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            paths: Vec::new(),
            time_unit_ms: default_time_unit(),
            types: default_types(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub mode: WorkloadMode,
    #[serde(default)]
    pub arrival: ArrivalProcess,
    #[serde(default = "default_duration")]
    pub duration_ms: f64,
    #[serde(default)]
    pub seed: u64,
    /// source → type name or id → events/s, on top of the mode's base rates
    #[serde(default)]
    pub rates: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub phases: Vec<PhaseSpec>,
    #[serde(default)]
    pub trace: Option<TraceSpec>,
}

/// Arrivals for one run, plus the trace when the workload replays one.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub arrivals: Arrivals,
    pub trace: Option<Trace>,
}

impl WorkloadSpec {
    pub fn new(mode: WorkloadMode) -> Self {
        Self {
            mode,
            arrival: ArrivalProcess::Poisson,
            duration_ms: default_duration(),
            seed: 0,
            rates: BTreeMap::new(),
            phases: Vec::new(),
            trace: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Workload(e.to_string()))
    }

    /// Loads a workload file; relative trace paths are taken from the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let mut spec = Self::parse(&text)?;
        if let (Some(trace), Some(dir)) = (spec.trace.as_mut(), path.parent()) {
            for p in &mut trace.paths {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(spec)
    }

    /// Per-source rates before phases: the mode's base, then overrides.
    pub fn base_rates(&self, topology: &Topology) -> Result<SourceRates, HarnessError> {
        let mut rates = match self.mode {
            WorkloadMode::BalancedSynthetic | WorkloadMode::Trace => topology.default_rates(),
            WorkloadMode::UnbalancedSynthetic => {
                let preset = presets::unbalanced_rates();
                if self.rates.is_empty() && !preset.keys().all(|s| topology.sources.iter().any(|x| x.id == *s)) {
                    return Err(HarnessError::Workload(
                        "unbalanced_synthetic needs explicit rates for this topology".into(),
                    ));
                }
                let mut r = topology.default_rates();
                if self.rates.is_empty() {
                    for (s, m) in preset {
                        r.insert(s, m);
                    }
                }
                r
            }
        };
        for (src, overrides) in &self.rates {
            let spec = topology
                .sources
                .iter()
                .find(|s| s.id.as_str() == src)
                .ok_or_else(|| HarnessError::Workload(format!("unknown source `{src}`")))?;
            for (ty, &rate) in overrides {
                let t = resolve_type(topology, ty)?;
                if !spec.types.contains(&t) {
                    return Err(HarnessError::Workload(format!("source `{src}` does not emit `{ty}`")));
                }
                if !(rate >= 0.0 && rate.is_finite()) {
                    return Err(HarnessError::Workload(format!("rate {rate} for {src}/{ty}")));
                }
                rates.entry(spec.id.clone()).or_default().insert(t, rate);
            }
        }
        Ok(rates)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.duration_ms > 0.0 && self.duration_ms.is_finite()) {
            return Err(HarnessError::Workload(format!("duration_ms {}", self.duration_ms)));
        }
        for p in &self.phases {
            if !(p.at_ms >= 0.0 && p.scale >= 0.0 && p.scale.is_finite()) {
                return Err(HarnessError::Workload(format!(
                    "phase at {} ms scale {}",
                    p.at_ms, p.scale
                )));
            }
        }
        if self.mode == WorkloadMode::Trace && !self.phases.is_empty() {
            return Err(HarnessError::Workload("phases do not apply to trace replay".into()));
        }
        Ok(())
    }

    pub fn prepare(&self, topology: &Topology) -> Result<Prepared, HarnessError> {
        self.validate()?;
        if self.mode == WorkloadMode::Trace {
            let spec = self.trace.clone().unwrap_or_default();
            let files = if spec.paths.is_empty() {
                vec![TraceFile::bundled()]
            } else {
                spec.paths
                    .iter()
                    .map(|p| TraceFile::read(p))
                    .collect::<Result<_, _>>()?
            };
            let sources: Vec<NodeId> = topology.sources.iter().map(|s| s.id.clone()).collect();
            let trace = ingest_trace(&files, &sources, spec.types, spec.time_unit_ms)?;
            for e in &trace.events {
                let src = topology
                    .sources
                    .iter()
                    .find(|s| s.id == e.source)
                    .expect("from topology");
                if !src.types.contains(&e.event.event_type) {
                    return Err(HarnessError::Workload(format!(
                        "trace type {} is not emitted by `{}`",
                        e.event.event_type, src.id
                    )));
                }
            }
            return Ok(Prepared {
                arrivals: Arrivals::Replay(trace.events.clone()),
                trace: Some(trace),
            });
        }

        let base = self.base_rates(topology)?;
        let mut phases = vec![RatePhase {
            at_ms: 0.0,
            rates: base.clone(),
        }];
        let mut sorted = self.phases.clone();
        sorted.sort_by(|a, b| a.at_ms.total_cmp(&b.at_ms));
        for p in sorted {
            let rates = base
                .iter()
                .map(|(s, m)| (s.clone(), m.iter().map(|(&t, &r)| (t, r * p.scale)).collect()))
                .collect();
            phases.push(RatePhase { at_ms: p.at_ms, rates });
        }
        Ok(Prepared {
            arrivals: Arrivals::Generated {
                process: self.arrival,
                phases,
            },
            trace: None,
        })
    }
}

fn resolve_type(topology: &Topology, name: &str) -> Result<TypeId, HarnessError> {
    if let Some(t) = topology.types.iter().find(|t| t.name == name) {
        return Ok(t.id);
    }
    name.parse::<u32>()
        .ok()
        .map(TypeId)
        .filter(|&t| topology.has_type(t))
        .ok_or_else(|| HarnessError::Workload(format!("unknown type `{name}`")))
}
