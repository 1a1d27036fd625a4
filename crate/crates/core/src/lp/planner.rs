//! From a measured snapshot to a shedding configuration.
//!
//! Only the bottleneck sheds. Its processing ratios `x` are the decisions;
//! the outputs `y` of its patterns and of every pattern downstream of it
//! follow from them through the selectivity functions. Everything else in
//! the graph is frozen at its measured output rate, which keeps each
//! constraint linear: a free `y` is bounded by `x · λ` at the bottleneck
//! (with λ measured) or by a sum of other `y` further down.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::problem::{LpProblem, Relation, Sense};
use super::simplex::{solve, LpSolution, LpStatus};
use crate::model::{NodeId, NodeKind, PatternId, Topology, TopologyError, TypeId};
use crate::selectivity::{build_selectivity, SelExpr, SelTerm};
use crate::shedding::{ShedderConfig, Snapshot};

/// Branch enumeration over MAX nodes stops here; beyond it each MAX is
/// relaxed to the sum of its inputs.
pub const MAX_BRANCHES: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum LpError {
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error("snapshot has no measurement for {0}")]
    MissingSnapshot(String),
    #[error("solver finished with status {0:?}")]
    Solver(LpStatus),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Weighted arrivals at the sinks.
    Global,
    /// Outputs of the bottleneck itself.
    Local,
}

/// One shedding decision at the bottleneck.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShedPair {
    pub pattern: PatternId,
    pub ty: TypeId,
    pub lambda: f64,
    pub ptime_s: f64,
    /// Whether the pattern reads this type at all.
    pub relevant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Input {
    /// `λ · x[pair]`
    Shed { lambda: f64, pair: usize },
    /// `constant + Σ y[producers]`
    Flow { constant: f64, producers: Vec<usize> },
}

/// A pattern whose output is a decision variable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternNode {
    pub pattern: PatternId,
    pub operator: NodeId,
    pub f: u32,
    pub cap: f64,
    pub expr: SelExpr,
    pub inputs: BTreeMap<TypeId, Input>,
    pub at_bottleneck: bool,
    /// Sum of the weights of the sinks this pattern feeds.
    pub sink_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BottleneckModel {
    pub bottleneck: NodeId,
    pub lambda: f64,
    pub p_star: f64,
    pub pairs: Vec<ShedPair>,
    /// Free patterns in topological order.
    pub nodes: Vec<PatternNode>,
    /// Weighted sink arrivals that do not depend on the bottleneck.
    pub fixed_output: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub y: Vec<f64>,
    pub global: f64,
    pub local: f64,
    /// Mean processing time per event at the bottleneck, seconds.
    pub ptime_s: f64,
}

impl Evaluation {
    pub fn value(&self, objective: Objective) -> f64 {
        match objective {
            Objective::Global => self.global,
            Objective::Local => self.local,
        }
    }
}

pub fn build_model(
    topology: &Topology,
    snapshot: &Snapshot,
    bottleneck: &str,
    p_star: f64,
) -> Result<BottleneckModel, LpError> {
    let op = topology
        .operator(bottleneck)
        .ok_or_else(|| LpError::UnknownOperator(bottleneck.to_owned()))?;
    let snap = snapshot
        .operator(bottleneck)
        .ok_or_else(|| LpError::MissingSnapshot(format!("operator {bottleneck}")))?;

    let mut pairs = Vec::new();
    for p in &op.patterns {
        let sel = build_selectivity(p);
        let ptime_s = snap.ptime_s.get(&p.id).copied().unwrap_or_else(|| p.ptime_s());
        for (&ty, &lambda) in &snap.arrivals {
            if lambda > 0.0 {
                pairs.push(ShedPair {
                    pattern: p.id.clone(),
                    ty,
                    lambda,
                    ptime_s,
                    relevant: sel.uses(ty),
                });
            }
        }
    }

    let downstream = topology.transitive_successors(bottleneck)?;
    let free_ops: Vec<usize> = topology
        .operator_order()?
        .into_iter()
        .filter(|&i| {
            let id = &topology.operators[i].id;
            id.as_str() == bottleneck || downstream.contains(id)
        })
        .collect();

    let mut index: BTreeMap<PatternId, usize> = BTreeMap::new();
    let mut nodes = Vec::new();
    for &oi in &free_ops {
        let o = &topology.operators[oi];
        let at_bottleneck = o.id.as_str() == bottleneck;
        let mu = snapshot
            .operator(o.id.as_str())
            .and_then(|s| s.mu)
            .or(o.service_rate_hint)
            .unwrap_or(f64::INFINITY);
        for p in &o.patterns {
            let sel = build_selectivity(p);
            let mut inputs = BTreeMap::new();
            for ty in sel.types() {
                let input = if at_bottleneck {
                    match pairs.iter().position(|q| q.pattern == p.id && q.ty == ty) {
                        Some(pair) => Input::Shed {
                            lambda: pairs[pair].lambda,
                            pair,
                        },
                        None => Input::Flow {
                            constant: 0.0,
                            producers: Vec::new(),
                        },
                    }
                } else {
                    flow_input(topology, snapshot, o.id.as_str(), ty, &index)?
                };
                inputs.insert(ty, input);
            }
            let sink_weight: f64 = topology
                .edges_from(o.id.as_str())
                .filter(|e| e.carries(p.output_type))
                .filter_map(|e| match topology.node_kind(e.to.as_str()) {
                    Some(NodeKind::Sink(s)) => Some(topology.sinks[s].weight),
                    _ => None,
                })
                .sum();
            index.insert(p.id.clone(), nodes.len());
            nodes.push(PatternNode {
                pattern: p.id.clone(),
                operator: o.id.clone(),
                f: p.f,
                cap: f64::from(p.f) * mu,
                expr: sel.expr,
                inputs,
                at_bottleneck,
                sink_weight,
            });
        }
    }

    let mut fixed_output = 0.0;
    for o in &topology.operators {
        if free_ops.iter().any(|&i| topology.operators[i].id == o.id) {
            continue;
        }
        for p in &o.patterns {
            let w: f64 = topology
                .edges_from(o.id.as_str())
                .filter(|e| e.carries(p.output_type))
                .filter_map(|e| match topology.node_kind(e.to.as_str()) {
                    Some(NodeKind::Sink(s)) => Some(topology.sinks[s].weight),
                    _ => None,
                })
                .sum();
            if w > 0.0 {
                fixed_output += w * measured_output(snapshot, o.id.as_str(), &p.id)?;
            }
        }
    }

    Ok(BottleneckModel {
        bottleneck: op.id.clone(),
        lambda: snap.lambda(),
        p_star,
        pairs,
        nodes,
        fixed_output,
    })
}

fn measured_output(snapshot: &Snapshot, op: &str, pattern: &PatternId) -> Result<f64, LpError> {
    snapshot
        .operator(op)
        .and_then(|s| s.outputs.get(pattern))
        .copied()
        .ok_or_else(|| LpError::MissingSnapshot(format!("output of {pattern}")))
}

fn flow_input(
    topology: &Topology,
    snapshot: &Snapshot,
    op: &str,
    ty: TypeId,
    index: &BTreeMap<PatternId, usize>,
) -> Result<Input, LpError> {
    let mut constant = 0.0;
    let mut producers = Vec::new();
    for e in topology.edges_into(op).filter(|e| e.carries(ty)) {
        match topology.node_kind(e.from.as_str()) {
            Some(NodeKind::Source(_)) => {
                constant += snapshot
                    .sources
                    .get(&e.from)
                    .and_then(|r| r.get(&ty))
                    .copied()
                    .unwrap_or(0.0);
            }
            Some(NodeKind::Operator(i)) => {
                for p in topology.operators[i].patterns.iter().filter(|p| p.output_type == ty) {
                    match index.get(&p.id) {
                        Some(&k) => producers.push(k),
                        None => constant += measured_output(snapshot, e.from.as_str(), &p.id)?,
                    }
                }
            }
            _ => {}
        }
    }
    Ok(Input::Flow { constant, producers })
}

impl BottleneckModel {
    /// Mean processing time at the bottleneck for ratios `x`.
    pub fn ptime(&self, x: &[f64]) -> f64 {
        if self.lambda <= 0.0 {
            return 0.0;
        }
        self.pairs
            .iter()
            .zip(x)
            .map(|(p, &xi)| p.lambda / self.lambda * p.ptime_s * xi)
            .sum()
    }

    pub fn is_feasible(&self, x: &[f64]) -> bool {
        self.ptime(x) <= self.p_star * (1.0 + 1e-12) + 1e-15
    }

    fn rate(&self, input: &Input, x: &[f64], y: &[f64]) -> f64 {
        match input {
            Input::Shed { lambda, pair } => lambda * x[*pair],
            Input::Flow { constant, producers } => constant + producers.iter().map(|&k| y[k]).sum::<f64>(),
        }
    }

    /// Largest outputs the ratios `x` allow, propagated downstream.
    pub fn evaluate(&self, x: &[f64]) -> Evaluation {
        let mut y = vec![0.0; self.nodes.len()];
        for (k, node) in self.nodes.iter().enumerate() {
            let v = node
                .expr
                .eval(&mut |t| node.inputs.get(&t).map_or(0.0, |inp| self.rate(inp, x, &y)));
            y[k] = (f64::from(node.f) * v).min(node.cap);
        }
        let global = self.fixed_output + self.nodes.iter().zip(&y).map(|(n, v)| n.sink_weight * v).sum::<f64>();
        let local = self
            .nodes
            .iter()
            .zip(&y)
            .filter(|(n, _)| n.at_bottleneck)
            .map(|(_, v)| v)
            .sum();
        Evaluation {
            global,
            local,
            ptime_s: self.ptime(x),
            y,
        }
    }

    /// Child counts of every MAX node, in a fixed traversal order.
    fn max_arities(&self) -> Vec<usize> {
        fn walk(e: &SelExpr, out: &mut Vec<usize>) {
            if let SelExpr::Max(t) = e {
                out.push(t.len());
            }
            for t in e.terms() {
                if let SelTerm::Expr(sub) = t {
                    walk(sub, out);
                }
            }
        }
        let mut out = Vec::new();
        for n in &self.nodes {
            walk(&n.expr, &mut out);
        }
        out
    }

    /// Every combination of MAX children, or `None` (one relaxed problem)
    /// when there are more than [`MAX_BRANCHES`].
    pub fn branches(&self) -> Vec<Option<Vec<usize>>> {
        let arities = self.max_arities();
        let total = arities.iter().try_fold(1usize, |acc, &a| acc.checked_mul(a));
        match total {
            Some(n) if n <= MAX_BRANCHES => (0..n)
                .map(|mut i| {
                    let mut choice = Vec::with_capacity(arities.len());
                    for &a in &arities {
                        choice.push(i % a);
                        i /= a;
                    }
                    Some(choice)
                })
                .collect(),
            _ => {
                warn!(
                    "{} MAX nodes exceed {MAX_BRANCHES} branches; relaxing them to sums",
                    arities.len()
                );
                vec![None]
            }
        }
    }

    /// Lipschitz bound of the objective in each ratio.
    pub fn lipschitz(&self, objective: Objective) -> Vec<f64> {
        let np = self.pairs.len();
        let mut gains: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let term_gain = |ty: TypeId, gains: &Vec<Vec<f64>>| -> Vec<f64> {
                let mut g = vec![0.0; np];
                match node.inputs.get(&ty) {
                    Some(Input::Shed { lambda, pair }) => g[*pair] = *lambda,
                    Some(Input::Flow { producers, .. }) => {
                        for &k in producers {
                            for (gi, v) in g.iter_mut().zip(&gains[k]) {
                                *gi += v;
                            }
                        }
                    }
                    None => {}
                }
                g
            };
            fn expr_gain(
                e: &SelExpr,
                gains: &Vec<Vec<f64>>,
                term_gain: &dyn Fn(TypeId, &Vec<Vec<f64>>) -> Vec<f64>,
                np: usize,
            ) -> Vec<f64> {
                let mut out = vec![0.0f64; np];
                for t in e.terms() {
                    let g = match t {
                        SelTerm::Rate { ty, k } => {
                            term_gain(*ty, gains).into_iter().map(|v| v / f64::from(*k)).collect()
                        }
                        SelTerm::Expr(sub) => expr_gain(sub, gains, term_gain, np),
                    };
                    for (o, v) in out.iter_mut().zip(g) {
                        *o = o.max(v);
                    }
                }
                out
            }
            let g: Vec<f64> = expr_gain(&node.expr, &gains, &term_gain, np)
                .into_iter()
                .map(|v| v * f64::from(node.f))
                .collect();
            gains.push(g);
        }
        let mut total = vec![0.0; np];
        for (node, g) in self.nodes.iter().zip(&gains) {
            let w = match objective {
                Objective::Global => node.sink_weight,
                Objective::Local => f64::from(u8::from(node.at_bottleneck)),
            };
            for (t, v) in total.iter_mut().zip(g) {
                *t += w * v;
            }
        }
        total
    }

    /// The LP for one branch choice. Variables are laid out as all `x`
    /// (in pair order), then all `y` (in node order), then auxiliaries.
    pub fn to_problem(&self, objective: Objective, branch: Option<&[usize]>) -> LpProblem {
        let mut lp = LpProblem::new(Sense::Maximize);
        for p in &self.pairs {
            lp.add_variable(format!("x_{}_{}", sanitize(p.pattern.as_str()), p.ty), 0.0, 1.0);
        }
        let y0 = self.pairs.len();
        for n in &self.nodes {
            lp.add_variable(format!("y_{}", sanitize(n.pattern.as_str())), 0.0, n.cap);
        }
        let mut ctx = Emit {
            lp: &mut lp,
            model: self,
            branch,
            next_max: 0,
            y0,
            rows: 0,
        };
        for k in 0..self.nodes.len() {
            ctx.bound(y0 + k, 1.0, &self.nodes[k].expr, k, f64::from(self.nodes[k].f));
        }

        if self.p_star.is_finite() && self.lambda > 0.0 {
            let (scale, rhs) = if self.p_star > 0.0 {
                (1.0 / self.p_star, 1.0)
            } else {
                (1.0, 0.0)
            };
            let terms: Vec<(usize, f64)> = self
                .pairs
                .iter()
                .enumerate()
                .map(|(i, p)| (i, p.lambda / self.lambda * p.ptime_s * scale))
                .collect();
            lp.add_constraint("ptime", &terms, Relation::Le, rhs);
        }

        lp.objective = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(k, n)| {
                let w = match objective {
                    Objective::Global => n.sink_weight,
                    Objective::Local => f64::from(u8::from(n.at_bottleneck)),
                };
                (w != 0.0).then_some((y0 + k, w))
            })
            .collect();
        lp
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect()
}

struct Emit<'a> {
    lp: &'a mut LpProblem,
    model: &'a BottleneckModel,
    branch: Option<&'a [usize]>,
    next_max: usize,
    y0: usize,
    rows: usize,
}

impl Emit<'_> {
    /// Constrains `target * t ≤ s * expr` for node `k`'s inputs, where
    /// `t` is the coefficient on the target variable.
    fn bound(&mut self, target: usize, t: f64, expr: &SelExpr, k: usize, s: f64) {
        match expr {
            SelExpr::Min(terms) => {
                for term in terms {
                    self.term(target, t, term, k, s);
                }
            }
            SelExpr::Max(terms) => {
                let slot = self.next_max;
                self.next_max += 1;
                match self.branch {
                    Some(choice) => {
                        let c = choice[slot];
                        // children of the unchosen branches may still hold
                        // MAX nodes; skip their slots to stay aligned
                        for (i, term) in terms.iter().enumerate() {
                            if i == c {
                                self.term(target, t, term, k, s);
                            } else if let SelTerm::Expr(sub) = term {
                                self.next_max += sub.max_nodes();
                            }
                        }
                    }
                    None => {
                        let mut row = vec![(target, t)];
                        let mut aux = Vec::new();
                        for _ in terms {
                            let z = self
                                .lp
                                .add_variable(format!("z{}", self.lp.variables.len()), 0.0, f64::INFINITY);
                            row.push((z, -s));
                            aux.push(z);
                        }
                        self.row(&row, 0.0);
                        for (term, z) in terms.iter().zip(aux) {
                            self.term(z, 1.0, term, k, 1.0);
                        }
                    }
                }
            }
        }
    }

    fn term(&mut self, target: usize, t: f64, term: &SelTerm, k: usize, s: f64) {
        match term {
            SelTerm::Expr(sub) => self.bound(target, t, sub, k, s),
            SelTerm::Rate { ty, k: mult } => {
                let coef = s / f64::from(*mult);
                let node = &self.model.nodes[k];
                match node.inputs.get(ty) {
                    Some(Input::Shed { lambda, pair }) => {
                        self.row(&[(target, t), (*pair, -coef * lambda)], 0.0);
                    }
                    Some(Input::Flow { constant, producers }) => {
                        let mut row = vec![(target, t)];
                        row.extend(producers.iter().map(|&p| (self.y0 + p, -coef)));
                        self.row(&row, coef * constant);
                    }
                    None => self.row(&[(target, t)], 0.0),
                }
            }
        }
    }

    fn row(&mut self, terms: &[(usize, f64)], rhs: f64) {
        self.lp
            .add_constraint(format!("c{}", self.rows), terms, Relation::Le, rhs);
        self.rows += 1;
    }
}

/// Result of planning at one bottleneck.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Plan {
    pub config: ShedderConfig,
    /// Ratio per pair, in [`BottleneckModel::pairs`] order.
    pub x: Vec<f64>,
    /// Optimal value of the solved objective, including the fixed part for
    /// the global objective.
    pub objective_value: f64,
    /// Weighted sink arrivals predicted for `config`.
    pub predicted_output: f64,
    pub branches: usize,
    pub iterations: usize,
    #[serde(skip)]
    pub problem: LpProblem,
}

/// Converts the `x` part of a solution into ratios.
pub fn extract_config(model: &BottleneckModel, solution: &LpSolution) -> Result<ShedderConfig, LpError> {
    if !solution.is_optimal() {
        return Err(LpError::Solver(solution.status));
    }
    let mut c = ShedderConfig::new();
    for (p, &v) in model.pairs.iter().zip(&solution.values) {
        c.set(p.pattern.as_str(), p.ty, v.clamp(0.0, 1.0))
            .expect("clamped ratio is in range");
    }
    Ok(c)
}

/// All problems (one per MAX branch) for the global objective.
pub fn build_lp(
    topology: &Topology,
    snapshot: &Snapshot,
    bottleneck: &str,
    p_star: f64,
) -> Result<Vec<LpProblem>, LpError> {
    let m = build_model(topology, snapshot, bottleneck, p_star)?;
    Ok(m.branches()
        .iter()
        .map(|b| m.to_problem(Objective::Global, b.as_deref()))
        .collect())
}

/// Same as [`build_lp`] but maximizing the bottleneck's own output.
pub fn local_objective_variant(
    topology: &Topology,
    snapshot: &Snapshot,
    bottleneck: &str,
    p_star: f64,
) -> Result<Vec<LpProblem>, LpError> {
    let m = build_model(topology, snapshot, bottleneck, p_star)?;
    Ok(m.branches()
        .iter()
        .map(|b| m.to_problem(Objective::Local, b.as_deref()))
        .collect())
}

/// Solves every branch, keeps the best, then re-solves to shed as much
/// processing time as possible without losing objective.
pub fn plan(model: &BottleneckModel, objective: Objective) -> Result<Plan, LpError> {
    let branches = model.branches();
    let mut best: Option<(LpProblem, LpSolution)> = None;
    let mut iterations = 0;
    let mut first_status = None;
    for b in &branches {
        let problem = model.to_problem(objective, b.as_deref());
        let sol = solve(&problem);
        iterations += sol.iterations;
        first_status.get_or_insert(sol.status);
        if !sol.is_optimal() {
            continue;
        }
        let better = best
            .as_ref()
            .is_none_or(|(_, s)| sol.objective > s.objective + 1e-9 * (1.0 + s.objective.abs()));
        if better {
            best = Some((problem, sol));
        }
    }
    let Some((problem, sol)) = best else {
        return Err(LpError::Solver(first_status.unwrap_or(LpStatus::Infeasible)));
    };
    let z = sol.objective;

    let mut tie = problem.clone();
    let obj_terms = tie.objective.clone();
    tie.add_constraint("keep_objective", &obj_terms, Relation::Ge, z - 1e-9 * (1.0 + z.abs()));
    tie.sense = Sense::Minimize;
    tie.objective = model
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p.lambda * p.ptime_s))
        .filter(|&(_, c)| c != 0.0)
        .collect();
    let tie_sol = solve(&tie);
    iterations += tie_sol.iterations;
    let final_sol = if tie_sol.is_optimal() {
        tie_sol
    } else {
        warn!("tie-break pass ended with {:?}; keeping first optimum", tie_sol.status);
        sol
    };

    let config = extract_config(model, &final_sol)?;
    let x: Vec<f64> = final_sol.values[..model.pairs.len()]
        .iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    let fixed = match objective {
        Objective::Global => model.fixed_output,
        Objective::Local => 0.0,
    };
    Ok(Plan {
        predicted_output: model.evaluate(&x).global,
        config,
        x,
        objective_value: z + fixed,
        branches: branches.len(),
        iterations,
        problem,
    })
}

/// Builds the model for `bottleneck` and plans it.
pub fn optimize(
    topology: &Topology,
    snapshot: &Snapshot,
    bottleneck: &str,
    p_star: f64,
    objective: Objective,
) -> Result<Plan, LpError> {
    let model = build_model(topology, snapshot, bottleneck, p_star)?;
    plan(&model, objective)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    pub value: f64,
    pub x: Vec<f64>,
    pub points: u64,
}

/// Exhaustive search over ratios on a grid of `step`. Pairs the pattern
/// does not read are held at 0, since processing them only costs time.
pub fn grid_oracle(model: &BottleneckModel, objective: Objective, step: f64) -> GridResult {
    let levels = (1.0 / step).round() as usize;
    let relevant: Vec<usize> = (0..model.pairs.len()).filter(|&i| model.pairs[i].relevant).collect();
    let mut x = vec![0.0; model.pairs.len()];
    let mut counter = vec![0usize; relevant.len()];
    let mut best = GridResult {
        value: f64::NEG_INFINITY,
        x: x.clone(),
        points: 0,
    };
    loop {
        for (c, &i) in counter.iter().zip(&relevant) {
            x[i] = (*c as f64 / levels as f64).min(1.0);
        }
        best.points += 1;
        if model.is_feasible(&x) {
            let v = model.evaluate(&x).value(objective);
            if v > best.value {
                best.value = v;
                best.x.clone_from(&x);
            }
        }
        // odometer increment
        let mut d = 0;
        loop {
            if d == counter.len() {
                return best;
            }
            counter[d] += 1;
            if counter[d] <= levels {
                break;
            }
            counter[d] = 0;
            d += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{presets, Edge, EventType, OperatorSpec, PatternAst, PatternSpec, SinkSpec, SourceSpec};
    use crate::selectivity::predict_network;
    use crate::shedding::{avg_ptime, feasible_ptime, is_feasible, OperatorSnapshot};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn single(ast: PatternAst, rates: &[(u32, f64)], ptime_us: f64) -> (Topology, Snapshot) {
        let mut t = Topology::default();
        let n = rates.len() as u32;
        for i in 0..=n {
            t.types.push(EventType {
                id: TypeId(i),
                name: format!("t{i}"),
            });
        }
        t.sources.push(SourceSpec {
            id: "src".into(),
            types: (0..n).map(TypeId).collect(),
            rates: rates.iter().map(|&(ty, r)| (TypeId(ty), r)).collect(),
        });
        t.operators.push(OperatorSpec::new(
            "w",
            vec![PatternSpec::new("P", ast, n).ptime(ptime_us)],
        ));
        t.sinks.push(SinkSpec {
            id: "k".into(),
            weight: 1.0,
        });
        let all: Vec<u32> = (0..n).collect();
        t.edges = vec![Edge::new("src", "w", &all), Edge::new("w", "k", &[n])];
        let snap = predict_network(&t, &t.default_rates(), &ShedderConfig::new())
            .unwrap()
            .snapshot(&t, &t.default_rates());
        (t, snap)
    }

    #[test]
    fn and_needs_no_more_than_the_scarce_side() {
        let (t, s) = single(PatternAst::and(&[0, 1]), &[(0, 100.0), (1, 50.0)], 1.0);
        let plan = optimize(&t, &s, "w", f64::INFINITY, Objective::Global).unwrap();
        assert_relative_eq!(plan.objective_value, 50.0, max_relative = 1e-9);
        // the tie-break sheds the surplus of type 0
        assert_relative_eq!(plan.config.ratio("P", TypeId(0)), 0.5, max_relative = 1e-8);
        assert_relative_eq!(plan.config.ratio("P", TypeId(1)), 1.0, max_relative = 1e-9);
        let m = build_model(&t, &s, "w", f64::INFINITY).unwrap();
        let g = grid_oracle(&m, Objective::Global, 0.01);
        assert_relative_eq!(g.value, 50.0, max_relative = 1e-9);
    }

    #[test]
    fn zero_budget_sheds_everything() {
        let (t, s) = single(PatternAst::and(&[0, 1]), &[(0, 100.0), (1, 50.0)], 100.0);
        let plan = optimize(&t, &s, "w", 0.0, Objective::Global).unwrap();
        assert!(plan.x.iter().all(|&v| v == 0.0));
        assert_eq!(plan.objective_value, 0.0);
    }

    #[test]
    fn running_example_free_variables() {
        let t = presets::running_example();
        let rates = presets::balanced_rates();
        let s = predict_network(&t, &rates, &ShedderConfig::new())
            .unwrap()
            .snapshot(&t, &rates);
        let m = build_model(&t, &s, "w2", 0.0002).unwrap();
        let names: Vec<&str> = m.nodes.iter().map(|n| n.pattern.as_str()).collect();
        assert_eq!(names, ["Q21", "Q22", "Q31", "Q41"]);
        assert_eq!(m.pairs.len(), 8);
        assert!(m.pairs.iter().all(|p| p.pattern.as_str() != "Q11"));
        // Q31 reads Q11 as a constant and Q21 as a variable
        assert_eq!(
            m.nodes[2].inputs[&TypeId(presets::Q11)],
            Input::Flow {
                constant: 1000.0,
                producers: vec![]
            }
        );
        assert_eq!(
            m.nodes[2].inputs[&TypeId(presets::Q21)],
            Input::Flow {
                constant: 0.0,
                producers: vec![0]
            }
        );
        let lp = &build_lp(&t, &s, "w2", 0.0002).unwrap()[0];
        assert_eq!(lp.variables.len(), 8 + 4);
        for c in &lp.constraints {
            assert!(c.terms.iter().all(|&(j, a)| j < lp.variables.len() && a.is_finite()));
        }
        assert!(lp.to_lp_format().contains("ptime:"));
    }

    fn snapshot_for(rates: &BTreeMap<NodeId, BTreeMap<TypeId, f64>>) -> (Topology, Snapshot, f64) {
        let t = presets::running_example();
        let s = predict_network(&t, rates, &ShedderConfig::new())
            .unwrap()
            .snapshot(&t, rates);
        let lambda = s.operator("w2").unwrap().lambda();
        let p_star = feasible_ptime(presets::W2_BOUND_MS / 1000.0, lambda).unwrap();
        (t, s, p_star)
    }

    #[test]
    fn balanced_local_and_global_agree() {
        let (t, s, p_star) = snapshot_for(&presets::balanced_rates());
        let g = optimize(&t, &s, "w2", p_star, Objective::Global).unwrap();
        let l = optimize(&t, &s, "w2", p_star, Objective::Local).unwrap();
        assert_relative_eq!(g.predicted_output, l.predicted_output, max_relative = 1e-8);
        assert!(is_feasible(&g.config, &s, "w2", presets::W2_BOUND_MS / 1000.0).unwrap());
        assert!(avg_ptime(&g.config, &s, "w2") <= p_star * (1.0 + 1e-9));
    }

    #[test]
    fn unbalanced_global_wins() {
        let (t, s, p_star) = snapshot_for(&presets::unbalanced_rates());
        let g = optimize(&t, &s, "w2", p_star, Objective::Global).unwrap();
        let l = optimize(&t, &s, "w2", p_star, Objective::Local).unwrap();
        assert!(
            g.predicted_output > l.predicted_output + 100.0,
            "{} vs {}",
            g.predicted_output,
            l.predicted_output
        );
        assert_relative_eq!(g.objective_value, g.predicted_output, max_relative = 1e-8);
    }

    #[test]
    fn empty_edge_moves_everything_to_the_other_pattern() {
        let mut rates = presets::balanced_rates();
        rates.get_mut("s1").unwrap().insert(TypeId(0), 0.0);
        let (t, s, p_star) = snapshot_for(&rates);
        let g = optimize(&t, &s, "w2", p_star, Objective::Global).unwrap();
        for ty in 0..4 {
            assert_eq!(g.config.ratio("Q21", TypeId(ty)), 0.0);
        }
        assert!(g.config.ratio("Q22", TypeId(1)) > 0.5);
    }

    #[test]
    fn single_output_bottleneck_plans_identically() {
        let (t, s) = single(PatternAst::seq(&[0, 0, 1]), &[(0, 900.0), (1, 300.0)], 1000.0);
        let lambda = s.operator("w").unwrap().lambda();
        let p_star = feasible_ptime(0.05, lambda).unwrap();
        let g = optimize(&t, &s, "w", p_star, Objective::Global).unwrap();
        let l = optimize(&t, &s, "w", p_star, Objective::Local).unwrap();
        assert_eq!(g.config, l.config);
    }

    #[test]
    fn or_pattern_branches() {
        // or(0, 1): shed the cheaper-to-keep side entirely
        let (t, s) = single(PatternAst::or(&[0, 1]), &[(0, 100.0), (1, 300.0)], 1000.0);
        let m = build_model(&t, &s, "w", 0.0005).unwrap();
        assert_eq!(m.branches().len(), 2);
        let plan = plan(&m, Objective::Global).unwrap();
        let g = grid_oracle(&m, Objective::Global, 0.01);
        assert!(plan.objective_value >= g.value - 1e-9);
        assert_relative_eq!(m.evaluate(&plan.x).global, plan.objective_value, max_relative = 1e-8);
        // the budget allows 200 events/s of 400; all of it goes to type 1
        assert_relative_eq!(plan.objective_value, 200.0, max_relative = 1e-9);
    }

    #[test]
    fn many_or_nodes_relax_to_sums() {
        let ast = PatternAst::And(vec![
            PatternAst::or(&[0, 1]),
            PatternAst::or(&[1, 2]),
            PatternAst::or(&[0, 2]),
            PatternAst::or(&[0, 1]),
        ]);
        let (t, s) = single(ast, &[(0, 10.0), (1, 20.0), (2, 30.0)], 1.0);
        let m = build_model(&t, &s, "w", f64::INFINITY).unwrap();
        assert_eq!(m.branches(), vec![None]);
        let p = plan(&m, Objective::Global).unwrap();
        // relaxation over-approximates the true value
        assert!(p.objective_value >= m.evaluate(&p.x).global - 1e-9);
    }

    #[test]
    fn lipschitz_bounds_grid_gap() {
        let (t, s) = single(PatternAst::and(&[0, 1]), &[(0, 120.0), (1, 70.0)], 3000.0);
        let m = build_model(&t, &s, "w", 0.002).unwrap();
        let p = plan(&m, Objective::Global).unwrap();
        let g = grid_oracle(&m, Objective::Global, 0.02);
        let l: f64 = m.lipschitz(Objective::Global).iter().sum();
        assert!(g.value <= p.objective_value + 1e-9);
        assert!(g.value >= p.objective_value - 0.02 * l);
    }

    #[test]
    fn snapshot_without_bottleneck_is_an_error() {
        let t = presets::running_example();
        let s = Snapshot::default();
        assert!(matches!(
            build_model(&t, &s, "w2", 1.0),
            Err(LpError::MissingSnapshot(_))
        ));
        assert!(matches!(
            build_model(&t, &s, "nope", 1.0),
            Err(LpError::UnknownOperator(_))
        ));
        let mut s = Snapshot::default();
        s.operators.insert("w2".into(), OperatorSnapshot::default());
        // w1's measured outputs are needed for Q31 and Q41
        assert!(matches!(
            build_model(&t, &s, "w2", 1.0),
            Err(LpError::MissingSnapshot(_))
        ));
    }

    #[test]
    fn balanced_example_shape() {
        let (t, s, p_star) = snapshot_for(&presets::balanced_rates());
        let m = build_model(&t, &s, "w2", p_star).unwrap();
        let g = plan(&m, Objective::Global).unwrap();
        let e = m.evaluate(&g.x);
        // the whole budget goes to Q21; Q22 is dropped
        assert_relative_eq!(e.ptime_s, p_star, max_relative = 1e-8);
        assert!(e.y[0] > 800.0 && e.y[0] < 860.0, "{}", e.y[0]);
        assert_eq!(e.y[1], 0.0);
        for p in m.pairs.iter().filter(|p| !p.relevant) {
            assert_eq!(g.config.ratio(p.pattern.as_str(), p.ty), 0.0);
        }
    }

    fn pattern_strategy() -> impl Strategy<Value = PatternAst> {
        prop_oneof![
            Just(PatternAst::and(&[0, 1])),
            Just(PatternAst::seq(&[0, 0, 1])),
            Just(PatternAst::or(&[0, 1])),
            Just(PatternAst::And(vec![PatternAst::atom(0), PatternAst::or(&[1, 2])])),
            Just(PatternAst::seq(&[0, 1, 2])),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn lp_matches_grid_search(
            ast in pattern_strategy(),
            r0 in 1.0f64..500.0,
            r1 in 1.0f64..500.0,
            r2 in 1.0f64..500.0,
            ptime_us in 10.0f64..2000.0,
            budget in 0.05f64..1.2,
        ) {
            let (t, s) = single(ast, &[(0, r0), (1, r1), (2, r2)], ptime_us);
            let full = t.operators[0].patterns[0].ptime_s();
            let m = build_model(&t, &s, "w", budget * full).unwrap();
            let p = plan(&m, Objective::Global).unwrap();
            prop_assert!(m.is_feasible(&p.x));
            let h = 0.05;
            let g = grid_oracle(&m, Objective::Global, h);
            let l: f64 = m.lipschitz(Objective::Global).iter().sum();
            let tol = 1e-8 * (1.0 + p.objective_value);
            prop_assert!(g.value <= p.objective_value + tol, "grid {} lp {}", g.value, p.objective_value);
            prop_assert!(g.value >= p.objective_value - h * l - tol, "grid {} lp {}", g.value, p.objective_value);
            prop_assert!((m.evaluate(&p.x).global - p.objective_value).abs() <= tol);
        }
    }
}
