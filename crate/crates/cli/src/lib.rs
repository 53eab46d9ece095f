//! Command-line driver: benchmark generation, staged runs, evaluation and
//! ablation reports.

// `!(x > 0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
