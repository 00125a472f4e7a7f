//! Evaluation, user clustering and result emission.

mod cluster;
mod eval;
mod report;

pub use cluster::{cluster_users, Cluster, MAX_CLUSTER_SIZE};
pub use eval::{evaluate, EvalError, EvalResult, UserEval};
pub use report::{emit_results, render_csv, render_svg, sig6, Manifest, ReportError, ResultRow, CSV_HEADER};
