//! Optimal-control docking of a robot-held endoscope into a trocar.
//!
//! Each control cycle solves a small box-constrained nonlinear least-squares
//! problem over joint angles. The objective pulls the scope tip onto the
//! trocar axis and toward an insertion goal, aligns the optical axis, damps
//! joint motion, and optionally follows an admittance reference built from
//! the estimated tip force.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod force;
pub mod harness;
pub mod kinematics;
pub mod sim;
pub mod solver;
pub mod task;

pub use config::{ResolvedTrial, TrialConfig};
pub use error::{Error, Result};
pub use force::{estimate_tip_force, AdmittanceGains, AdmittanceState, ExternalTorques, ForceEstimate};
pub use harness::{metric_m, run_bench, run_trial, BenchSummary, TrialRecord, TrialRow};
pub use kinematics::{ChainPose, Frame, JointLimits, JointSpec, KinematicChain};
pub use sim::{ContactKind, ContactResult, EndoscopeGeometry, NoiseModel, Simulation, TrocarModel, TrocarState};
pub use solver::{solve_box_qp, step_bounds, BoxBounds, SolveOutcome, SolverSettings, SqpSolver};
pub use task::{total_objective, CostReport, CostTerm, TaskParams};

pub use nalgebra::{DMatrix, DVector, Vector3};
