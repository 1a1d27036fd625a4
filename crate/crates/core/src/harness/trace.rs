//! Replay of borg-style machine measurement traces.
//!
//! Rows need `timestamp`, `machine_id` and `value` columns. Each machine id
//! is mapped to one of `n_types` primitive types by the rank of its hash,
//! so the mapping only depends on the set of ids present.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;

use super::HarnessError;
use crate::engine::SourceEvent;
use crate::model::{Event, NodeId, TypeId, Value};

/// Seed and size of the trace that ships with the crate.
pub const BUNDLED_SEED: u64 = 20_230_101;
pub const BUNDLED_ROWS: usize = 50_000;
const BUNDLED: &str = include_str!("../../data/synthetic_trace.csv");

/// One input file, already read.
#[derive(Debug, Clone)]
pub struct TraceFile {
    pub name: String,
    pub text: String,
}

impl TraceFile {
    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self {
            name: path.display().to_string(),
            text,
        })
    }

    pub fn bundled() -> Self {
        Self {
            name: "bundled:synthetic_trace.csv".into(),
            text: BUNDLED.to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trace {
    /// Sorted by timestamp within each source; timestamps in ms from the
    /// earliest accepted row.
    pub events: Vec<SourceEvent>,
    /// machine id → type
    pub mapping: BTreeMap<String, u32>,
    pub rows: u64,
    pub malformed: u64,
    pub per_source: BTreeMap<NodeId, u64>,
}

impl Trace {
    pub fn mapping_json(&self) -> String {
        serde_json::to_string_pretty(&self.mapping).expect("string map serializes")
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Type of every id: rank by (hash, id), modulo `n_types`.
pub fn type_mapping<'a>(ids: impl IntoIterator<Item = &'a str>, n_types: u32) -> BTreeMap<String, u32> {
    let distinct: BTreeSet<&str> = ids.into_iter().collect();
    let mut ranked: Vec<(u64, &str)> = distinct.into_iter().map(|id| (fnv1a64(id.as_bytes()), id)).collect();
    ranked.sort();
    ranked
        .into_iter()
        .enumerate()
        .map(|(rank, (_, id))| (id.to_owned(), rank as u32 % n_types))
        .collect()
}

struct Row {
    ts: f64,
    machine: String,
    value: f64,
}

fn parse_file(file: &TraceFile, malformed: &mut u64) -> Result<Vec<Row>, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file.text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| HarnessError::Trace(format!("{}: {e}", file.name)))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| HarnessError::Trace(format!("{}: no `{name}` column", file.name)))
    };
    let (c_ts, c_id, c_val) = (col("timestamp")?, col("machine_id")?, col("value")?);

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let parsed = rec.ok().and_then(|r| {
            let ts: f64 = r.get(c_ts)?.parse().ok()?;
            let machine = r.get(c_id)?;
            let value: f64 = r.get(c_val)?.parse().ok()?;
            (ts.is_finite() && value.is_finite() && !machine.is_empty()).then(|| Row {
                ts,
                machine: machine.to_owned(),
                value,
            })
        });
        match parsed {
            Some(row) => rows.push(row),
            None => *malformed += 1,
        }
    }
    Ok(rows)
}

/// Reads `files` into per-source event streams.
///
/// With at least as many files as sources, each source gets a contiguous
/// share of the files. With fewer, the rows of all files are dealt to the
/// sources round-robin.
pub fn ingest_trace(
    files: &[TraceFile],
    sources: &[NodeId],
    n_types: u32,
    time_unit_ms: f64,
) -> Result<Trace, HarnessError> {
    if files.is_empty() {
        return Err(HarnessError::EmptyTrace("no trace files".into()));
    }
    if sources.is_empty() {
        return Err(HarnessError::Trace("no sources to feed".into()));
    }
    if n_types == 0 || !(time_unit_ms > 0.0) {
        return Err(HarnessError::Trace("types and time unit must be positive".into()));
    }
    let mut malformed = 0;
    let mut parsed = Vec::with_capacity(files.len());
    for f in files {
        parsed.push(parse_file(f, &mut malformed)?);
    }
    let rows: u64 = parsed.iter().map(|r| r.len() as u64).sum();
    if rows == 0 {
        return Err(HarnessError::EmptyTrace(format!(
            "no valid rows ({malformed} malformed)"
        )));
    }
    if malformed > 0 {
        log::warn!("skipped {malformed} malformed trace rows");
    }

    let mapping = type_mapping(parsed.iter().flatten().map(|r| r.machine.as_str()), n_types);
    let t0 = parsed.iter().flatten().map(|r| r.ts).fold(f64::INFINITY, f64::min);

    let n = sources.len();
    let mut per: Vec<Vec<(f64, &Row)>> = vec![Vec::new(); n];
    let mut k = 0;
    for (i, file_rows) in parsed.iter().enumerate() {
        for row in file_rows {
            let s = if files.len() >= n { i * n / files.len() } else { k % n };
            k += 1;
            per[s].push(((row.ts - t0) * time_unit_ms, row));
        }
    }

    let mut events = Vec::with_capacity(rows as usize);
    let mut per_source = BTreeMap::new();
    for (s, mut list) in per.into_iter().enumerate() {
        list.sort_by(|a, b| a.0.total_cmp(&b.0));
        per_source.insert(sources[s].clone(), list.len() as u64);
        for (ts, row) in list {
            let ev = Event::new(0, TypeId(mapping[&row.machine]), ts)
                .with_attribute("machine_id", Value::Str(row.machine.clone()))
                .with_attribute("value", Value::Float(row.value));
            events.push(SourceEvent {
                source: sources[s].clone(),
                event: ev,
            });
        }
    }
    Ok(Trace {
        events,
        mapping,
        rows,
        malformed,
        per_source,
    })
}

/// A borg-like CSV: microsecond timestamps, skewed machine popularity.
/// `rows` rows span about ten seconds.
pub fn synthetic_trace(rows: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let machines: Vec<String> = (0..40)
        .map(|_| format!("{}", rng.random_range(1_000_000u64..9_999_999_999)))
        .collect();
    // Zipf-like popularity
    let weights: Vec<f64> = (1..=machines.len()).map(|k| 1.0 / k as f64).collect();
    let total: f64 = weights.iter().sum();
    let gap = Exp::new(rows as f64 / 10e6).expect("positive rate");

    let mut out = String::with_capacity(rows * 36);
    out.push_str("timestamp,machine_id,value\n");
    let mut ts = 600_000_000.0f64;
    for _ in 0..rows {
        ts += gap.sample(&mut rng);
        let mut pick = rng.random::<f64>() * total;
        let mut m = machines.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if pick < *w {
                m = i;
                break;
            }
            pick -= w;
        }
        let value: f64 = rng.random();
        writeln!(out, "{},{},{:.4}", ts.round() as u64, machines[m], value).expect("string write");
    }
    out
}
