//! Fixtures shared by the criterion benchmarks.

use nalgebra::DVector;
use trocar_core::{BoxBounds, ResolvedTrial, TaskParams, TrialConfig};

/// The default scene, resolved.
pub fn default_trial() -> ResolvedTrial {
    TrialConfig::default().resolve().expect("default config resolves")
}

/// Deterministic spread of configurations around `center`, within `radius` per joint.
pub fn configurations(center: &DVector<f64>, radius: f64, count: usize) -> Vec<DVector<f64>> {
    (0..count)
        .map(|k| DVector::from_fn(center.len(), |j, _| center[j] + radius * ((k * 7 + j * 13) as f64 * 0.61).sin()))
        .collect()
}

/// First-cycle problem of the default scene: task, step bounds and start.
pub fn first_cycle(trial: &ResolvedTrial) -> (TaskParams, BoxBounds) {
    let center = trial.trocar.rest_center;
    let axis = trial.trocar.rest_axis;
    let goal = center + axis * (trial.sim.insertion_depth + trial.goal_overshoot);
    let params = TaskParams::new(center, axis, goal, trial.q0.clone())
        .and_then(|p| p.with_weights(trial.weights))
        .expect("default task is valid");
    let bounds = trocar_core::step_bounds(&trial.limits, &trial.q0, trial.sim.dt)
        .expect("default limits are valid")
        .bounds;
    (params, bounds)
}
