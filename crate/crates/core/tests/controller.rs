use std::collections::BTreeMap;

use cepshed::controller::{Controller, ControllerOptions, Decision, Reason};
use cepshed::engine::{ArrivalProcess, Arrivals, RatePhase, SimOptions, Simulation};
use cepshed::lp::Objective;
use cepshed::model::{presets, NodeId, TypeId};
use cepshed::shedding::ShedderConfig;

type Rates = BTreeMap<NodeId, BTreeMap<TypeId, f64>>;

fn scaled(factor: f64) -> Rates {
    let mut r = presets::balanced_rates();
    for v in r.values_mut().flat_map(|m| m.values_mut()) {
        *v *= factor;
    }
    r
}

fn phases(list: &[(f64, f64)]) -> Arrivals {
    Arrivals::Generated {
        process: ArrivalProcess::Poisson,
        phases: list
            .iter()
            .map(|&(at_ms, f)| RatePhase {
                at_ms,
                rates: scaled(f),
            })
            .collect(),
    }
}

fn sim(arrivals: Arrivals, horizon_ms: f64, seed: u64) -> Simulation {
    let t = presets::running_example();
    Simulation::new(
        &t,
        arrivals,
        ShedderConfig::new(),
        SimOptions {
            horizon_ms,
            seed,
            ..SimOptions::default()
        },
    )
    .unwrap()
}

fn controller(objective: Objective) -> Controller {
    let t = presets::running_example();
    Controller::new(&t, ControllerOptions::new("w2", presets::W2_BOUND_MS, objective)).unwrap()
}

/// Runs to the horizon and returns the decisions together with the
/// bottleneck event count seen when virtual time first passed `mark_ms`.
fn run_marked(mut c: Controller, mut s: Simulation, mark_ms: f64) -> (Vec<Decision>, u64) {
    let mut mark = None;
    while let Some(step) = s.step() {
        c.observe(&mut s, &step);
        if mark.is_none() && s.now() >= mark_ms {
            mark = Some(c.bottleneck_events());
        }
    }
    (c.decisions().to_vec(), mark.unwrap())
}

fn mean_ratio(cfg: &ShedderConfig) -> f64 {
    let t = presets::running_example();
    let op = t.operator("w2").unwrap();
    let mut n = 0.0;
    let mut sum = 0.0;
    for p in &op.patterns {
        for ty in op.input_types() {
            sum += cfg.ratio(p.id.as_str(), ty);
            n += 1.0;
        }
    }
    sum / n
}

#[test]
fn stationary_load_settles() {
    let c = controller(Objective::Global);
    let (rep, cr, decisions) = c.run(sim(Arrivals::poisson(presets::balanced_rates()), 20_000.0, 1));
    assert!(!decisions.is_empty());
    assert_eq!(decisions[0].reason, Reason::Overload);
    let settled = decisions[0].t_ms + 2000.0;
    let late = decisions.iter().filter(|d| d.t_ms > settled).count();
    assert!(late <= 1, "{late} recomputes after {settled} ms");
    assert_eq!(cr.recomputes as usize, decisions.len());

    // the backlog built before the first decision drains
    let w2: Vec<_> = rep.timeseries.iter().filter(|r| r.operator.as_str() == "w2").collect();
    let peak = w2.iter().map(|r| r.queue_len).max().unwrap();
    assert!(w2.last().unwrap().queue_len < peak / 4, "{peak}");
}

#[test]
fn halving_the_input_triggers_overshed() {
    let (decisions, mark) = run_marked(
        controller(Objective::Global),
        sim(phases(&[(0.0, 1.0), (15_000.0, 0.5)]), 25_000.0, 3),
        15_000.0,
    );
    let after = decisions
        .iter()
        .find(|d| d.t_ms > 15_000.0)
        .expect("a decision after the drop");
    assert_eq!(after.reason, Reason::Overshed);
    let window = ControllerOptions::new("w2", 50.0, Objective::Global).monitor_window as u64;
    assert!(
        after.bottleneck_events - mark <= 2 * window,
        "{} events",
        after.bottleneck_events - mark
    );
    let before = decisions.iter().rev().find(|d| d.t_ms <= 15_000.0).unwrap();
    assert!(mean_ratio(&after.config) > mean_ratio(&before.config));
}

#[test]
fn overload_step_lowers_ratios() {
    let (decisions, _) = run_marked(
        controller(Objective::Local),
        sim(phases(&[(0.0, 0.1), (8_000.0, 1.0)]), 14_000.0, 5),
        8_000.0,
    );
    assert!(decisions.iter().all(|d| d.t_ms > 8_000.0), "decision under light load");
    let first = decisions.first().expect("a decision after the step");
    assert_eq!(first.reason, Reason::Overload);
    assert!(mean_ratio(&first.config) < 1.0);
}

#[test]
fn decisions_serialize_one_per_line() {
    let c = controller(Objective::Global);
    let (_, cr, decisions) = c.run(sim(Arrivals::poisson(presets::balanced_rates()), 5_000.0, 2));
    let text = Controller::decisions_jsonl(&decisions);
    assert_eq!(text.lines().count(), decisions.len());
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["t", "reason", "p_meas", "p_star", "solver_ms", "config"] {
            assert!(v.get(key).is_some(), "{key} missing");
        }
    }
    let report = serde_json::to_value(&cr).unwrap();
    assert!(!report.to_string().contains("solver_ms"));
    assert_eq!(report["history"].as_array().unwrap().len(), decisions.len());
}

#[test]
fn monitors_report_sparingly() {
    let c = controller(Objective::Global);
    let (rep, cr, _) = c.run(sim(Arrivals::poisson(presets::balanced_rates()), 10_000.0, 4));
    let events: u64 = rep.operators.values().map(|o| o.counters.events).sum();
    let window = ControllerOptions::new("w2", 50.0, Objective::Global).monitor_window as u64;
    // at most one report per check, one check per tenth of a window
    assert!(cr.messages > 0);
    assert!(
        cr.messages <= events / (window / 10),
        "{} messages for {events} events",
        cr.messages
    );
}
