//! Choosing shedding ratios with a linear program.

mod planner;
mod problem;
mod simplex;

pub use planner::{
    build_lp, build_model, extract_config, grid_oracle, local_objective_variant, optimize, plan, BottleneckModel,
    Evaluation, GridResult, Input, LpError, Objective, PatternNode, Plan, ShedPair, MAX_BRANCHES,
};
pub use problem::{Constraint, LpProblem, Relation, Sense, Variable};
pub use simplex::{solve, LpSolution, LpStatus};
