//! Load shedding for distributed complex event processing.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod engine;
pub mod harness;
pub mod lp;
pub mod model;
pub mod selectivity;
pub mod shedding;
