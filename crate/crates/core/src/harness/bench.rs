//! Planner wall time on synthetic bottlenecks.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::HarnessError;
use crate::lp::{build_model, plan, Objective};
use crate::model::{
    Edge, EventType, NodeId, OperatorSpec, PatternAst, PatternSpec, SinkSpec, SourceSpec, Topology, TypeId,
};
use crate::selectivity::predict_network;
use crate::shedding::{avg_ptime, ShedderConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub types: usize,
    pub queries: usize,
    pub share: f64,
    /// Median wall time of model build plus solve.
    pub ms: f64,
    pub variables: usize,
    pub constraints: usize,
    pub iterations: usize,
}

/// One source with `types` primitive types feeding one operator with
/// `queries` AND patterns. Each type is read by `ceil(share * queries)`
/// patterns, assigned round-robin.
pub fn bench_topology(types: usize, queries: usize, share: f64, seed: u64) -> Topology {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_type = ((share * queries as f64).ceil() as usize).clamp(1, queries);
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); queries];
    for t in 0..types {
        for j in 0..per_type {
            members[(t + j) % queries].push(t as u32);
        }
    }

    let mut topo = Topology::default();
    let n_types = types + queries;
    topo.types = (0..n_types as u32)
        .map(|i| EventType {
            id: TypeId(i),
            name: format!("t{i}"),
        })
        .collect();
    let rates: BTreeMap<TypeId, f64> = (0..types as u32)
        .map(|t| (TypeId(t), rng.random_range(10.0..1000.0)))
        .collect();
    topo.sources.push(SourceSpec {
        id: "src".into(),
        types: rates.keys().copied().collect(),
        rates,
    });
    let patterns = members
        .iter()
        .enumerate()
        .map(|(q, m)| {
            let m = if m.is_empty() {
                vec![(q % types) as u32]
            } else {
                m.clone()
            };
            PatternSpec::new(&format!("q{q}"), PatternAst::and(&m), (types + q) as u32)
                .ptime(rng.random_range(10.0..100.0))
                .window(1e9)
        })
        .collect();
    topo.operators.push(OperatorSpec::new("b", patterns));
    topo.sinks.push(SinkSpec {
        id: "k".into(),
        weight: 1.0,
    });
    let all_in: Vec<u32> = (0..types as u32).collect();
    let all_out: Vec<u32> = (types as u32..n_types as u32).collect();
    topo.edges = vec![Edge::new("src", "b", &all_in), Edge::new("b", "k", &all_out)];
    topo
}

/// Builds and solves the bottleneck LP `reps` times, with p* at half the
/// unshed processing time.
pub fn scalability_bench(
    types: usize,
    queries: usize,
    share: f64,
    reps: usize,
    seed: u64,
) -> Result<BenchRow, HarnessError> {
    if types == 0 || queries == 0 || reps == 0 || !(share > 0.0 && share <= 1.0) {
        return Err(HarnessError::Bench(format!(
            "types {types}, queries {queries}, share {share}, reps {reps}"
        )));
    }
    let topo = bench_topology(types, queries, share, seed);
    let rates: BTreeMap<NodeId, _> = topo.default_rates();
    let none = ShedderConfig::new();
    let snapshot = predict_network(&topo, &rates, &none)
        .map_err(|e| HarnessError::Bench(e.to_string()))?
        .snapshot(&topo, &rates);
    let p_star = 0.5 * avg_ptime(&none, &snapshot, "b");

    let mut times = Vec::with_capacity(reps);
    let mut last = None;
    for _ in 0..reps {
        let started = Instant::now();
        let model = build_model(&topo, &snapshot, "b", p_star).map_err(|e| HarnessError::Bench(e.to_string()))?;
        let plan = plan(&model, Objective::Global).map_err(|e| HarnessError::Bench(e.to_string()))?;
        times.push(started.elapsed().as_secs_f64() * 1000.0);
        last = Some(plan);
    }
    times.sort_by(f64::total_cmp);
    let plan = last.expect("reps > 0");
    Ok(BenchRow {
        types,
        queries,
        share,
        ms: times[times.len() / 2],
        variables: plan.problem.variables.len(),
        constraints: plan.problem.constraints.len(),
        iterations: plan.iterations,
    })
}

pub fn bench_csv(rows: &[BenchRow]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner().expect("vec writer")).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn share_sets_queries_per_type() {
        let t = bench_topology(10, 4, 0.5, 1);
        let op = &t.operators[0];
        for ty in 0..10 {
            let n = op
                .patterns
                .iter()
                .filter(|p| p.ast.atom_types().contains(&TypeId(ty)))
                .count();
            assert_eq!(n, 2);
        }
        assert!(crate::model::validate(&t).is_empty());
    }

    #[test]
    fn small_bench_solves_and_sheds() {
        let row = scalability_bench(10, 2, 1.0, 3, 7).unwrap();
        assert_eq!(row.variables, 10 * 2 + 2);
        assert!(row.ms < 50.0, "{} ms", row.ms);
        let csv = bench_csv(&[row]).unwrap();
        assert!(csv.starts_with("types,queries,share,ms,variables,constraints,iterations\n"));
    }

    #[test]
    fn bad_parameters_rejected() {
        assert!(scalability_bench(0, 1, 1.0, 1, 0).is_err());
        assert!(scalability_bench(1, 1, 0.0, 1, 0).is_err());
        assert!(scalability_bench(1, 1, 1.5, 1, 0).is_err());
    }
}
