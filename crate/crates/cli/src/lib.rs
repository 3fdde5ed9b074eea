//! Configuration, run matrix and output writers behind the `ccbf` binary.

// Validation writes `!(v > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod matrix;
pub mod plot;
pub mod table;

pub use config::{parse_config, parse_config_str, ConfigError, RunConfig, ScenarioKind, ScenarioParams};
pub use matrix::{run_matrix, MatrixReport, RunReport};
