//! Two-phase primal simplex over bounded variables.
//!
//! The tableau is kept row-wise in sparse form. LPs built from operator
//! graphs have a handful of nonzeros per row, and a pivot only touches
//! the rows that have an entry in the entering column, so this stays cheap
//! well beyond a thousand rows.
//!
//! Pricing is Dantzig's largest reduced cost. After a run of degenerate
//! pivots the solver switches to Bland's rule until it makes progress
//! again, which rules out cycling.

use log::debug;
use serde::Serialize;

use super::problem::{LpProblem, Relation, Sense};

const PIVOT_TOL: f64 = 1e-11;
const OPT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;
const DROP_TOL: f64 = 1e-14;
const DEGENERATE_STREAK: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    /// Iteration limit hit or the final point failed verification.
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LpSolution {
    pub status: LpStatus,
    /// One value per problem variable; meaningful only when optimal.
    pub values: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }

    fn failed(status: LpStatus, n: usize, iterations: usize) -> Self {
        Self {
            status,
            values: vec![0.0; n],
            objective: f64::NAN,
            iterations,
        }
    }
}

type Row = Vec<(usize, f64)>;

struct Tableau {
    rows: Vec<Row>,
    rhs: Vec<f64>,
    head: Vec<usize>,
    basic_row: Vec<Option<usize>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    x: Vec<f64>,
    iterations: usize,
    max_iterations: usize,
}

enum Outcome {
    Optimal,
    Unbounded,
    IterationLimit,
}

fn coeff(row: &Row, col: usize) -> f64 {
    row.binary_search_by_key(&col, |&(j, _)| j).map_or(0.0, |i| row[i].1)
}

/// `target -= factor * src`, skipping column `skip` (which cancels exactly).
fn axpy(target: &Row, factor: f64, src: &Row, skip: usize) -> Row {
    let mut out = Vec::with_capacity(target.len() + src.len());
    let (mut a, mut b) = (0, 0);
    while a < target.len() || b < src.len() {
        let ja = target.get(a).map_or(usize::MAX, |e| e.0);
        let jb = src.get(b).map_or(usize::MAX, |e| e.0);
        let (j, v) = if ja < jb {
            a += 1;
            (ja, target[a - 1].1)
        } else if jb < ja {
            b += 1;
            (jb, -factor * src[b - 1].1)
        } else {
            a += 1;
            b += 1;
            (ja, target[a - 1].1 - factor * src[b - 1].1)
        };
        if j != skip && v.abs() > DROP_TOL {
            out.push((j, v));
        }
    }
    out
}

impl Tableau {
    fn is_basic(&self, j: usize) -> bool {
        self.basic_row[j].is_some()
    }

    fn pivot(&mut self, p: usize, q: usize, d: &mut [f64]) {
        let t = coeff(&self.rows[p], q);
        let inv = 1.0 / t;
        let mut prow: Row = self.rows[p].iter().map(|&(j, v)| (j, v * inv)).collect();
        // the entering column becomes a unit vector
        for e in prow.iter_mut() {
            if e.0 == q {
                e.1 = 1.0;
            }
        }
        self.rhs[p] *= inv;
        for i in 0..self.rows.len() {
            if i == p {
                continue;
            }
            let f = coeff(&self.rows[i], q);
            if f != 0.0 {
                self.rows[i] = axpy(&self.rows[i], f, &prow, q);
                self.rhs[i] -= f * self.rhs[p];
            }
        }
        let dq = d[q];
        if dq != 0.0 {
            for &(j, v) in &prow {
                d[j] -= dq * v;
            }
            d[q] = 0.0;
        }
        let leaving = self.head[p];
        self.basic_row[leaving] = None;
        self.basic_row[q] = Some(p);
        self.head[p] = q;
        self.rows[p] = prow;
    }

    /// Recomputes basic values from the nonbasic ones.
    fn refresh_basics(&mut self) {
        for i in 0..self.rows.len() {
            let b = self.head[i];
            let mut v = self.rhs[i];
            for &(j, t) in &self.rows[i] {
                if j != b {
                    v -= t * self.x[j];
                }
            }
            self.x[b] = v;
        }
    }

    fn reduced_costs(&self, c: &[f64]) -> Vec<f64> {
        let mut d = c.to_vec();
        for (i, row) in self.rows.iter().enumerate() {
            let cb = c[self.head[i]];
            if cb != 0.0 {
                for &(j, t) in row {
                    d[j] -= cb * t;
                }
            }
        }
        d
    }

    /// Maximizes `c · x` from the current basic feasible point.
    fn optimize(&mut self, c: &[f64]) -> Outcome {
        let mut d = self.reduced_costs(c);
        let mut streak = 0usize;
        loop {
            if self.iterations >= self.max_iterations {
                return Outcome::IterationLimit;
            }
            let bland = streak >= DEGENERATE_STREAK;
            let mut entering: Option<(usize, f64)> = None;
            for j in 0..d.len() {
                if self.is_basic(j) || self.lower[j] == self.upper[j] {
                    continue;
                }
                let dj = d[j];
                let can_up = dj > OPT_TOL && self.x[j] < self.upper[j];
                let can_down = dj < -OPT_TOL && self.x[j] > self.lower[j];
                if !(can_up || can_down) {
                    continue;
                }
                if bland {
                    entering = Some((j, dj));
                    break;
                }
                if entering.is_none_or(|(_, best)| dj.abs() > best.abs()) {
                    entering = Some((j, dj));
                }
            }
            let Some((q, dq)) = entering else {
                return Outcome::Optimal;
            };
            let dir = dq.signum();
            self.iterations += 1;

            // ratio test; own bound flip first
            let mut theta = if dir > 0.0 {
                self.upper[q] - self.x[q]
            } else {
                self.x[q] - self.lower[q]
            };
            let mut leave: Option<(usize, f64)> = None;
            for (i, row) in self.rows.iter().enumerate() {
                let t = coeff(row, q);
                if t.abs() <= PIVOT_TOL {
                    continue;
                }
                let b = self.head[i];
                let rate = -t * dir;
                let limit = if rate < 0.0 {
                    if self.lower[b].is_finite() {
                        ((self.x[b] - self.lower[b]) / -rate).max(0.0)
                    } else {
                        continue;
                    }
                } else if self.upper[b].is_finite() {
                    ((self.upper[b] - self.x[b]) / rate).max(0.0)
                } else {
                    continue;
                };
                match leave {
                    _ if limit < theta - 1e-12 => {
                        theta = limit;
                        leave = Some((i, t));
                    }
                    Some((li, lt)) if limit <= theta + 1e-12 => {
                        let prefer = if bland { b < self.head[li] } else { t.abs() > lt.abs() };
                        if prefer {
                            theta = theta.min(limit);
                            leave = Some((i, t));
                        }
                    }
                    // ties with the entering bound keep the cheaper bound flip
                    _ => {}
                }
            }
            if !theta.is_finite() {
                return Outcome::Unbounded;
            }
            if theta <= 1e-12 {
                streak += 1;
            } else {
                streak = 0;
            }

            self.x[q] += dir * theta;
            for (i, row) in self.rows.iter().enumerate() {
                let t = coeff(row, q);
                if t != 0.0 {
                    self.x[self.head[i]] -= t * dir * theta;
                }
            }
            match leave {
                None => {
                    // bound flip
                    self.x[q] = if dir > 0.0 { self.upper[q] } else { self.lower[q] };
                }
                Some((p, t)) => {
                    let b = self.head[p];
                    let rate = -t * dir;
                    self.x[b] = if rate < 0.0 { self.lower[b] } else { self.upper[b] };
                    self.pivot(p, q, &mut d);
                }
            }
        }
    }
}

/// Solves `problem` exactly up to floating point; the returned point is
/// verified against every bound and constraint before being reported
/// optimal.
pub fn solve(problem: &LpProblem) -> LpSolution {
    let n = problem.variables.len();
    let m = problem.constraints.len();
    for v in &problem.variables {
        if v.lower > v.upper {
            return LpSolution::failed(LpStatus::Infeasible, n, 0);
        }
    }
    // columns: structural [0, n), slack [n, n+m), artificial [n+m, n+2m)
    let total = n + 2 * m;
    let mut lower = vec![0.0; total];
    let mut upper = vec![0.0; total];
    let mut x = vec![0.0; total];
    for (j, v) in problem.variables.iter().enumerate() {
        lower[j] = v.lower;
        upper[j] = v.upper;
        x[j] = if v.lower.is_finite() {
            v.lower
        } else if v.upper.is_finite() {
            v.upper
        } else {
            0.0
        };
    }
    let mut rows = Vec::with_capacity(m);
    let mut rhs = Vec::with_capacity(m);
    let mut head = Vec::with_capacity(m);
    let mut basic_row = vec![None; total];
    let mut artificials = Vec::new();
    for (i, c) in problem.constraints.iter().enumerate() {
        let s = n + i;
        let a = n + m + i;
        let (lo, hi) = match c.relation {
            Relation::Le => (0.0, f64::INFINITY),
            Relation::Ge => (f64::NEG_INFINITY, 0.0),
            Relation::Eq => (0.0, 0.0),
        };
        lower[s] = lo;
        upper[s] = hi;
        let activity: f64 = c.terms.iter().map(|&(j, v)| v * x[j]).sum();
        let r = c.rhs - activity;
        let mut row: Row = c.terms.clone();
        row.push((s, 1.0));
        if r >= lo - FEAS_TOL && r <= hi + FEAS_TOL {
            x[s] = r.clamp(lo, hi);
            head.push(s);
            basic_row[s] = Some(i);
            rows.push(row);
            rhs.push(c.rhs);
        } else {
            x[s] = r.clamp(lo, hi);
            let resid = r - x[s];
            let sigma = resid.signum();
            let mut row: Row = row.into_iter().map(|(j, v)| (j, v / sigma)).collect();
            row.push((a, 1.0));
            lower[a] = 0.0;
            upper[a] = f64::INFINITY;
            x[a] = resid.abs();
            head.push(a);
            basic_row[a] = Some(i);
            rows.push(row);
            rhs.push(c.rhs / sigma);
            artificials.push(a);
        }
    }
    let mut tab = Tableau {
        rows,
        rhs,
        head,
        basic_row,
        lower,
        upper,
        x,
        iterations: 0,
        max_iterations: 20 * (n + m) + 10_000,
    };

    if !artificials.is_empty() {
        let mut c1 = vec![0.0; total];
        for &a in &artificials {
            c1[a] = -1.0;
        }
        match tab.optimize(&c1) {
            Outcome::Optimal => {}
            Outcome::Unbounded | Outcome::IterationLimit => {
                return LpSolution::failed(LpStatus::NumericalFailure, n, tab.iterations);
            }
        }
        tab.refresh_basics();
        let infeasibility: f64 = artificials.iter().map(|&a| tab.x[a]).sum();
        let scale = 1.0 + problem.constraints.iter().map(|c| c.rhs.abs()).fold(0.0, f64::max);
        if infeasibility > FEAS_TOL * scale {
            debug!("phase one ended with infeasibility {infeasibility}");
            return LpSolution::failed(LpStatus::Infeasible, n, tab.iterations);
        }
        for &a in &artificials {
            tab.upper[a] = 0.0;
            tab.x[a] = 0.0;
            if let Some(p) = tab.basic_row[a] {
                let candidate = tab.rows[p]
                    .iter()
                    .filter(|&&(j, v)| j < n + m && !tab.is_basic(j) && v.abs() > 1e-9)
                    .max_by(|l, r| l.1.abs().total_cmp(&r.1.abs()))
                    .map(|&(j, _)| j);
                if let Some(q) = candidate {
                    let mut d = vec![0.0; total];
                    tab.pivot(p, q, &mut d);
                }
            }
        }
        tab.refresh_basics();
    }

    let sign = match problem.sense {
        Sense::Maximize => 1.0,
        Sense::Minimize => -1.0,
    };
    let mut c2 = vec![0.0; total];
    for &(j, v) in &problem.objective {
        c2[j] += sign * v;
    }
    let outcome = tab.optimize(&c2);
    match outcome {
        Outcome::Optimal => {}
        Outcome::Unbounded => return LpSolution::failed(LpStatus::Unbounded, n, tab.iterations),
        Outcome::IterationLimit => return LpSolution::failed(LpStatus::NumericalFailure, n, tab.iterations),
    }
    tab.refresh_basics();
    let mut values: Vec<f64> = tab.x[..n].to_vec();
    // snap values that sit within rounding of a bound
    for (v, var) in values.iter_mut().zip(&problem.variables) {
        if var.lower.is_finite() && (*v - var.lower).abs() <= FEAS_TOL * (1.0 + var.lower.abs()) {
            *v = var.lower;
        }
        if var.upper.is_finite() && (*v - var.upper).abs() <= FEAS_TOL * (1.0 + var.upper.abs()) {
            *v = var.upper;
        }
    }
    let violation = problem.max_violation(&values);
    if !(violation <= FEAS_TOL) {
        debug!("simplex result violates constraints by {violation:e}");
        return LpSolution::failed(LpStatus::NumericalFailure, n, tab.iterations);
    }
    LpSolution {
        status: LpStatus::Optimal,
        objective: problem.objective_value(&values),
        values,
        iterations: tab.iterations,
    }
}
