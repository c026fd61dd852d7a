//! Finite-difference self checks of a resolved trial at its start pose.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::Serialize;

use crate::config::ResolvedTrial;
use crate::error::Result;
use crate::kinematics::{orthonormality_error, KinematicChain};
use crate::task::{objective_value, total_objective, TaskParams};

const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct CheckItem {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfCheckReport {
    pub items: Vec<CheckItem>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, error: f64, tolerance: f64) {
        self.items.push(CheckItem {
            name: name.to_string(),
            error,
            tolerance,
            passed: error <= tolerance,
        });
    }
}

/// Central-difference Jacobian of the tip position.
pub fn tip_jacobian_fd(chain: &KinematicChain, q: &[f64], h: f64) -> Result<DMatrix<f64>> {
    let mut jac = DMatrix::zeros(3, q.len());
    let mut qp = q.to_vec();
    for j in 0..q.len() {
        qp[j] = q[j] + h;
        let plus = chain.tip_position(&qp)?;
        qp[j] = q[j] - h;
        let minus = chain.tip_position(&qp)?;
        qp[j] = q[j];
        jac.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

/// Central-difference gradient of the weighted objective.
pub fn objective_gradient_fd(q: &DVector<f64>, params: &TaskParams, chain: &KinematicChain, h: f64) -> Result<DVector<f64>> {
    let mut grad = DVector::zeros(q.len());
    let mut qp = q.clone();
    for j in 0..q.len() {
        qp[j] = q[j] + h;
        let plus = objective_value(&qp, params, chain)?;
        qp[j] = q[j] - h;
        let minus = objective_value(&qp, params, chain)?;
        qp[j] = q[j];
        grad[j] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Checks rotations, the analytic Jacobian and the objective gradient at
/// the start pose, with the force-feedback term placed just off the tip.
pub fn self_check(trial: &ResolvedTrial) -> Result<SelfCheckReport> {
    let chain = &trial.chain;
    let q = &trial.q0;
    let mut report = SelfCheckReport { items: Vec::new() };

    let pose = chain.pose(q.as_slice())?;
    let ortho = pose.frames().iter().map(|f| orthonormality_error(f.rotation.to_rotation_matrix().matrix())).fold(0.0, f64::max);
    report.push("frame orthonormality", ortho, 1e-12);

    let analytic = pose.linear_jacobian(&pose.tip());
    let numeric = tip_jacobian_fd(chain, q.as_slice(), FD_STEP)?;
    report.push("tip jacobian", (analytic - numeric).amax(), 1e-6);

    let tip = pose.tip();
    let goal = trial.trocar.rest_center + trial.trocar.rest_axis * trial.sim.insertion_depth;
    let params = TaskParams::new(trial.trocar.rest_center, trial.trocar.rest_axis, goal, q.map(|v| v + 0.01))?
        .with_weights(trial.weights)?
        .with_force_feedback(tip + Vector3::new(0.003, -0.002, 0.001));
    let analytic = total_objective(q, &params, chain)?;
    let numeric = objective_gradient_fd(q, &params, chain, FD_STEP)?;
    let scale = analytic.gradient.amax().max(1.0);
    report.push("objective gradient", (analytic.gradient - numeric).amax() / scale, 1e-5);
    Ok(report)
}
