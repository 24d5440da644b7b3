//! Analytic parameter / MAC accounting and the inference benchmark harness.

mod bench;
mod cost;

pub use bench::{bench_inference, BenchConfig, BenchReport, Environment};
pub use cost::{count_macs, count_params, CostReport, CostRow, CostTotals, LayerKind};
