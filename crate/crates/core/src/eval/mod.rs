//! Evaluation harness: augmented greedy inference, reference solvers,
//! CVRPLIB parsing, and report emission.

pub mod cvrplib;
pub mod evaluate;
pub mod exhaustive;
pub mod nearest;
pub mod report;

pub use cvrplib::{parse_cvrplib, CvrplibInstance};
pub use evaluate::{evaluate, Reference};
pub use exhaustive::{exhaustive_solve, MAX_EXHAUSTIVE_N};
pub use nearest::nearest_feasible;
pub use report::{emit_report, EvalReport, ReportFormat, VariantReport};
