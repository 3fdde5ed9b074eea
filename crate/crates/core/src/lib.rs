//! Consolidated control barrier functions with online weight adaptation.
//!
//! Several constraint functions `h_i` are folded into one candidate
//! `H = 1 − Σ φ(h_i, w_i)`, and the weights `w` follow a predictor-corrector
//! interior-point flow that keeps the C-CBF condition satisfiable under
//! input bounds.

// Feasibility checks read `!(b < 0.0)` so that NaN counts as infeasible.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod model;
pub mod numerics;
pub mod pcipm;
pub mod adaptation;
pub mod controller;
pub mod scenarios;

pub use adaptation::{AdaptationError, AdaptationOutput, FilterMargins, WeightState};
pub use controller::{ControlDecision, ControllerError, EcbfGains};
pub use model::{CcbfDerivatives, ClassK, ConstraintSpec, ControlAffineSystem, PhiKernel};
pub use numerics::{Matrix, NumericsError, QpConstraint, QpRow, QpSolution};
pub use pcipm::{BarrierError, BarrierProblem, BarrierTerm};
pub use scenarios::{
    AdaptationSettings, BicycleParams, ControllerKind, Metrics, Obstacle, OneDimParams, Outcome, Scenario, SimLog,
    SimRecord,
};
