use std::fmt::Write as _;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Sense {
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Variable {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Constraint {
    pub name: String,
    /// (variable index, coefficient); at most one entry per variable.
    pub terms: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

/// A linear program over bounded variables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LpProblem {
    pub sense: Sense,
    pub variables: Vec<Variable>,
    pub objective: Vec<(usize, f64)>,
    pub constraints: Vec<Constraint>,
}

impl Default for LpProblem {
    fn default() -> Self {
        Self::new(Sense::Maximize)
    }
}

impl LpProblem {
    pub fn new(sense: Sense) -> Self {
        Self {
            sense,
            variables: Vec::new(),
            objective: Vec::new(),
            constraints: Vec::new(),
        }
    }

    pub fn add_variable(&mut self, name: impl Into<String>, lower: f64, upper: f64) -> usize {
        self.variables.push(Variable {
            name: name.into(),
            lower,
            upper,
        });
        self.variables.len() - 1
    }

    /// Adds a constraint, merging repeated variables and dropping zeros.
    pub fn add_constraint(
        &mut self,
        name: impl Into<String>,
        terms: &[(usize, f64)],
        relation: Relation,
        rhs: f64,
    ) -> usize {
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
        for &(j, a) in terms {
            match merged.iter_mut().find(|(k, _)| *k == j) {
                Some(e) => e.1 += a,
                None => merged.push((j, a)),
            }
        }
        merged.retain(|&(_, a)| a != 0.0);
        merged.sort_by_key(|&(j, _)| j);
        self.constraints.push(Constraint {
            name: name.into(),
            terms: merged,
            relation,
            rhs,
        });
        self.constraints.len() - 1
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn objective_value(&self, values: &[f64]) -> f64 {
        self.objective.iter().map(|&(j, c)| c * values[j]).sum()
    }

    /// Largest scaled violation of a bound or constraint by `values`.
    pub fn max_violation(&self, values: &[f64]) -> f64 {
        if values.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for (v, &x) in self.variables.iter().zip(values) {
            let scale = 1.0 + x.abs();
            worst = worst.max((v.lower - x) / scale).max((x - v.upper) / scale);
        }
        for c in &self.constraints {
            let mut lhs = 0.0;
            let mut mag = c.rhs.abs();
            for &(j, a) in &c.terms {
                lhs += a * values[j];
                mag = mag.max((a * values[j]).abs());
            }
            let scale = 1.0 + mag;
            let v = match c.relation {
                Relation::Le => lhs - c.rhs,
                Relation::Ge => c.rhs - lhs,
                Relation::Eq => (lhs - c.rhs).abs(),
            };
            worst = worst.max(v / scale);
        }
        worst
    }

    /// CPLEX LP text format, readable by most external solvers.
    pub fn to_lp_format(&self) -> String {
        let mut out = String::new();
        out.push_str(match self.sense {
            Sense::Maximize => "Maximize\n",
            Sense::Minimize => "Minimize\n",
        });
        let _ = writeln!(out, " obj:{}", self.expression(&self.objective));
        out.push_str("Subject To\n");
        for c in &self.constraints {
            let rel = match c.relation {
                Relation::Le => "<=",
                Relation::Ge => ">=",
                Relation::Eq => "=",
            };
            let _ = writeln!(out, " {}:{} {} {}", c.name, self.expression(&c.terms), rel, c.rhs);
        }
        out.push_str("Bounds\n");
        for v in &self.variables {
            match (v.lower.is_finite(), v.upper.is_finite()) {
                (true, true) => {
                    let _ = writeln!(out, " {} <= {} <= {}", v.lower, v.name, v.upper);
                }
                (true, false) => {
                    let _ = writeln!(out, " {} >= {}", v.name, v.lower);
                }
                (false, true) => {
                    let _ = writeln!(out, " -inf <= {} <= {}", v.name, v.upper);
                }
                (false, false) => {
                    let _ = writeln!(out, " {} free", v.name);
                }
            }
        }
        out.push_str("End\n");
        out
    }

    fn expression(&self, terms: &[(usize, f64)]) -> String {
        if terms.is_empty() {
            return " 0".to_owned();
        }
        let mut s = String::new();
        for &(j, a) in terms {
            let sign = if a < 0.0 { '-' } else { '+' };
            let _ = write!(s, " {sign} {} {}", a.abs(), self.variables[j].name);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merges_duplicate_terms() {
        let mut p = LpProblem::new(Sense::Maximize);
        let x = p.add_variable("x", 0.0, 1.0);
        let y = p.add_variable("y", 0.0, f64::INFINITY);
        p.add_constraint("c", &[(y, 1.0), (x, 2.0), (y, -1.0), (x, 1.0)], Relation::Le, 3.0);
        assert_eq!(p.constraints[0].terms, vec![(x, 3.0)]);
    }

    #[test]
    fn lp_format() {
        let mut p = LpProblem::new(Sense::Maximize);
        let x = p.add_variable("x", 0.0, 1.0);
        let y = p.add_variable("y", 0.0, f64::INFINITY);
        p.objective = vec![(y, 1.0)];
        p.add_constraint("c0", &[(y, 1.0), (x, -100.0)], Relation::Le, 0.0);
        assert_eq!(
            p.to_lp_format(),
            "Maximize\n obj: + 1 y\nSubject To\n c0: - 100 x + 1 y <= 0\nBounds\n 0 <= x <= 1\n y >= 0\nEnd\n"
        );
    }

    #[test]
    fn violation_measure() {
        let mut p = LpProblem::new(Sense::Maximize);
        let x = p.add_variable("x", 0.0, 1.0);
        p.add_constraint("c", &[(x, 1.0)], Relation::Ge, 0.5);
        assert_eq!(p.max_violation(&[0.7]), 0.0);
        assert!(p.max_violation(&[0.2]) > 0.1);
        assert!(p.max_violation(&[1.5]) > 0.1);
    }
}
