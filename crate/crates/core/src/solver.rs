//! Per-cycle solve of the docking program.
//!
//! Gauss-Newton SQP: each iteration forms the local quadratic model of the
//! weighted objective, solves it as a box-constrained QP over the feasible
//! step, and accepts the step with an Armijo backtracking line search.

use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::kinematics::{JointLimits, KinematicChain};
use crate::task::{gauss_newton_model, objective_value, TaskParams};

const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MIN_STEP_SCALE: f64 = 1e-12;

/// Per-coordinate lower and upper bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxBounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        check_len(lower.len(), upper.len())?;
        if let Some(i) = lower.iter().zip(upper.iter()).position(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidParameter(format!("lower bound above upper bound at {i}")));
        }
        Ok(Self { lower, upper })
    }

    pub fn uniform(n: usize, lower: f64, upper: f64) -> Self {
        Self::new(DVector::from_element(n, lower), DVector::from_element(n, upper)).expect("valid uniform box")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(v, (l, u))| v.clamp(*l, *u)),
        )
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }

    fn shifted(&self, origin: &DVector<f64>) -> Self {
        Self {
            lower: &self.lower - origin,
            upper: &self.upper - origin,
        }
    }

    /// Intersection with `[-radius, radius]` per coordinate. Assumes the box contains zero.
    fn capped(&self, radius: f64) -> Self {
        Self {
            lower: self.lower.map(|l| l.max(-radius)),
            upper: self.upper.map(|u| u.min(radius)),
        }
    }
}

/// Bounds for one control cycle, with a flag set when `q_prev` had to be
/// pulled back inside the position limits first.
#[derive(Debug, Clone)]
pub struct StepBounds {
    pub bounds: BoxBounds,
    pub clamped: bool,
}

/// Intersects the position limits with the set reachable in `dt` at maximum joint speed.
pub fn step_bounds(limits: &JointLimits, q_prev: &DVector<f64>, dt: f64) -> Result<StepBounds> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter("dt must be positive".into()));
    }
    check_len(limits.dof(), q_prev.len())?;
    let compute = |q: &DVector<f64>| {
        let n = q.len();
        let lower = DVector::from_fn(n, |i, _| limits.q_min[i].max(q[i] - dt * limits.qdot_max[i]));
        let upper = DVector::from_fn(n, |i, _| limits.q_max[i].min(q[i] + dt * limits.qdot_max[i]));
        (lower, upper)
    };
    let (lower, upper) = compute(q_prev);
    if lower.iter().zip(upper.iter()).all(|(l, u)| l <= u) {
        return Ok(StepBounds {
            bounds: BoxBounds { lower, upper },
            clamped: false,
        });
    }
    let clamped_q = DVector::from_fn(q_prev.len(), |i, _| q_prev[i].clamp(limits.q_min[i], limits.q_max[i]));
    log::warn!("previous configuration outside joint limits; clamped before bounding the step");
    let (lower, upper) = compute(&clamped_q);
    Ok(StepBounds {
        bounds: BoxBounds { lower, upper },
        clamped: true,
    })
}

/// Minimizes `½xᵀHx + gᵀx` over `bounds` with a primal active-set method.
///
/// Each iteration solves the Newton system on the free coordinates, walks to
/// the first blocking bound, and releases the bound with the most negative
/// multiplier once a full step is taken.
pub fn solve_box_qp(h: &DMatrix<f64>, g: &DVector<f64>, bounds: &BoxBounds, start: &DVector<f64>) -> Result<DVector<f64>> {
    solve_box_qp_with_limit(h, g, bounds, start, 200)
}

pub fn solve_box_qp_with_limit(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    bounds: &BoxBounds,
    start: &DVector<f64>,
    max_iterations: usize,
) -> Result<DVector<f64>> {
    let n = g.len();
    if h.nrows() != n || h.ncols() != n {
        return Err(Error::InvalidParameter(format!("Hessian must be {n}×{n}")));
    }
    check_len(n, bounds.dim())?;
    check_len(n, start.len())?;

    let h = convexified(h)?;
    let scale = 1.0 + g.amax() + h.amax();
    let tol = 1e-13 * scale;

    let mut x = bounds.clamp(start);
    let mut fixed = vec![Fixed::Free; n];
    let mut grad = &h * &x + g;
    for i in 0..n {
        fixed[i] = if bounds.lower[i] == bounds.upper[i] {
            Fixed::Pinned
        } else if x[i] <= bounds.lower[i] && grad[i] >= 0.0 {
            Fixed::Lower
        } else if x[i] >= bounds.upper[i] && grad[i] <= 0.0 {
            Fixed::Upper
        } else {
            Fixed::Free
        };
    }

    // Each iteration either fixes or releases one coordinate; allow plenty.
    let limit = max_iterations.max(10 * n + 10);
    for _ in 0..limit {
        let free: Vec<usize> = (0..n).filter(|&i| fixed[i] == Fixed::Free).collect();
        let mut direction = DVector::zeros(n);
        if !free.is_empty() {
            let h_ff = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
            let rhs = DVector::from_fn(free.len(), |a, _| -grad[free[a]]);
            let chol = Cholesky::new(h_ff).ok_or(Error::SubproblemNotConvex { min_eigenvalue: 0.0 })?;
            let d_free = chol.solve(&rhs);
            for (a, &i) in free.iter().enumerate() {
                direction[i] = d_free[a];
            }
        }

        let mut alpha = 1.0;
        let mut blocking = None;
        for &i in &free {
            let d = direction[i];
            if d < 0.0 {
                let t = (bounds.lower[i] - x[i]) / d;
                if t < alpha {
                    alpha = t.max(0.0);
                    blocking = Some((i, Fixed::Lower));
                }
            } else if d > 0.0 {
                let t = (bounds.upper[i] - x[i]) / d;
                if t < alpha {
                    alpha = t.max(0.0);
                    blocking = Some((i, Fixed::Upper));
                }
            }
        }
        x.axpy(alpha, &direction, 1.0);
        if let Some((i, side)) = blocking {
            x[i] = if side == Fixed::Lower { bounds.lower[i] } else { bounds.upper[i] };
            fixed[i] = side;
        }
        x = bounds.clamp(&x);
        grad = &h * &x + g;
        if blocking.is_some() {
            continue;
        }

        // Full Newton step on the free set: check multipliers of the fixed set.
        let mut worst = None;
        let mut worst_value = -tol;
        for i in 0..n {
            let multiplier = match fixed[i] {
                Fixed::Lower => grad[i],
                Fixed::Upper => -grad[i],
                _ => continue,
            };
            if multiplier < worst_value {
                worst_value = multiplier;
                worst = Some(i);
            }
        }
        match worst {
            Some(i) => fixed[i] = Fixed::Free,
            None => break,
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fixed {
    Free,
    Lower,
    Upper,
    Pinned,
}

/// Symmetrizes `h` and checks it is positive semidefinite. Singular but
/// semidefinite matrices get a tiny diagonal shift so every principal
/// submatrix factors.
fn convexified(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut sym = (h + h.transpose()) * 0.5;
    if Cholesky::new(sym.clone()).is_some() {
        return Ok(sym);
    }
    let min_eigenvalue = SymmetricEigen::new(sym.clone()).eigenvalues.min();
    let scale = 1.0_f64.max(sym.amax());
    if !min_eigenvalue.is_finite() || min_eigenvalue < -1e-10 * scale {
        return Err(Error::SubproblemNotConvex { min_eigenvalue });
    }
    let shift = 1e-12 * scale - min_eigenvalue.min(0.0);
    for i in 0..sym.nrows() {
        sym[(i, i)] += shift;
    }
    Ok(sym)
}

/// Infinity norm of the projected-gradient residual `x − P(x − ∇)`.
pub fn projected_gradient_residual(x: &DVector<f64>, grad: &DVector<f64>, bounds: &BoxBounds) -> f64 {
    (x - bounds.clamp(&(x - grad))).amax()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub gauss_newton_damping: f64,
    pub qp_max_iterations: usize,
    /// Largest change of any joint in one SQP iteration, rad.
    pub max_step: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_tolerance: 1e-8,
            gauss_newton_damping: 1e-9,
            qp_max_iterations: 200,
            max_step: 0.5,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 || self.qp_max_iterations < 1 {
            return Err(Error::InvalidParameter("iteration limits must be at least 1".into()));
        }
        if !(self.step_tolerance > 0.0) || !(self.gauss_newton_damping >= 0.0) || !(self.max_step > 0.0) {
            return Err(Error::InvalidParameter("solver tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub q_star: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_total_cost: f64,
    pub solve_time: Duration,
}

/// Local quadratic model of an objective at a point.
#[derive(Debug, Clone)]
pub struct LocalModel {
    pub total: f64,
    pub gradient: DVector<f64>,
    /// Positive semidefinite curvature, without damping.
    pub hessian: DMatrix<f64>,
}

/// Something the SQP loop can minimize.
pub trait Objective {
    fn dof(&self) -> usize;
    fn value(&self, q: &DVector<f64>) -> Result<f64>;
    fn local_model(&self, q: &DVector<f64>) -> Result<LocalModel>;
}

/// The weighted docking objective for one cycle.
#[derive(Debug, Clone, Copy)]
pub struct DockingObjective<'a> {
    pub chain: &'a KinematicChain,
    pub params: &'a TaskParams,
}

impl Objective for DockingObjective<'_> {
    fn dof(&self) -> usize {
        self.chain.dof()
    }

    fn value(&self, q: &DVector<f64>) -> Result<f64> {
        objective_value(q, self.params, self.chain)
    }

    fn local_model(&self, q: &DVector<f64>) -> Result<LocalModel> {
        let model = gauss_newton_model(q, self.params, self.chain)?;
        Ok(LocalModel {
            hessian: model.hessian(0.0),
            total: model.total,
            gradient: model.gradient,
        })
    }
}

/// Gauss-Newton SQP solver. Holds scratch state between calls, so one
/// instance serves one control loop.
#[derive(Debug, Clone, Default)]
pub struct SqpSolver {
    settings: SolverSettings,
    history: Vec<f64>,
}

impl SqpSolver {
    pub fn new(settings: SolverSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Self {
            settings,
            history: Vec::with_capacity(64),
        })
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }

    /// Total cost at the start and after every accepted iterate of the last solve.
    pub fn cost_history(&self) -> &[f64] {
        &self.history
    }

    /// Solves the docking program warm-started at `params.q_prev`.
    pub fn solve(&mut self, chain: &KinematicChain, params: &TaskParams, bounds: &BoxBounds) -> Result<SolveOutcome> {
        params.validate()?;
        self.solve_objective(&DockingObjective { chain, params }, bounds, &params.q_prev)
    }

    pub fn solve_objective<O: Objective>(&mut self, objective: &O, bounds: &BoxBounds, start: &DVector<f64>) -> Result<SolveOutcome> {
        let started = Instant::now();
        check_len(objective.dof(), start.len())?;
        check_len(objective.dof(), bounds.dim())?;
        self.history.clear();

        let mut q = bounds.clamp(start);
        let mut model = objective.local_model(&q)?;
        if !model.total.is_finite() || model.gradient.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInitialState("non-finite cost at start".into()));
        }
        let mut value = objective.value(&q)?;
        self.history.push(value);

        let n = q.len();
        let damping = self.settings.gauss_newton_damping;
        let tol = self.settings.step_tolerance;
        let mut iterations = 0;
        let mut converged = false;

        while iterations < self.settings.max_iterations {
            iterations += 1;
            let mut hessian = model.hessian.clone();
            for i in 0..n {
                hessian[(i, i)] += damping;
            }
            let local_box = bounds.shifted(&q).capped(self.settings.max_step);
            let mut step = solve_box_qp_with_limit(
                &hessian,
                &model.gradient,
                &local_box,
                &DVector::zeros(n),
                self.settings.qp_max_iterations,
            )?;

            let pg_residual = projected_gradient_residual(&q, &model.gradient, bounds);
            let stationary = pg_residual <= 1e-12 * model.total.abs().max(1.0);
            if step.norm() < tol {
                if stationary {
                    converged = true;
                    break;
                }
                // Gauss-Newton step collapsed while the gradient has not.
                step = projected_gradient_step(&q, &model.gradient, &hessian, bounds);
            }

            let slope = model.gradient.dot(&step);
            if slope >= 0.0 {
                converged = stationary || step.norm() < tol;
                break;
            }

            let Some((candidate, accepted)) = self.line_search(objective, bounds, &q, &step, value, slope)? else {
                // No decrease possible along the step.
                converged = step.norm() < tol.sqrt() || stationary;
                break;
            };
            let moved = (&candidate - &q).norm();
            q = candidate;
            model = objective.local_model(&q)?;
            value = accepted;
            debug_assert!((model.total - value).abs() <= 1e-9 * value.abs().max(1.0));
            self.history.push(value);
            if moved < tol {
                converged = true;
                break;
            }
        }

        Ok(SolveOutcome {
            final_total_cost: value,
            q_star: q,
            iterations,
            converged,
            solve_time: started.elapsed(),
        })
    }

    fn line_search<O: Objective>(
        &self,
        objective: &O,
        bounds: &BoxBounds,
        q: &DVector<f64>,
        step: &DVector<f64>,
        f0: f64,
        slope: f64,
    ) -> Result<Option<(DVector<f64>, f64)>> {
        let mut t = 1.0;
        while t >= MIN_STEP_SCALE {
            let candidate = bounds.clamp(&(q + step * t));
            let value = objective.value(&candidate)?;
            if value.is_finite() && value <= f0 + ARMIJO_C * t * slope {
                return Ok(Some((candidate, value)));
            }
            t *= BACKTRACK;
        }
        Ok(None)
    }
}

fn projected_gradient_step(q: &DVector<f64>, grad: &DVector<f64>, hessian: &DMatrix<f64>, bounds: &BoxBounds) -> DVector<f64> {
    let curvature = hessian.norm().max(1e-12);
    bounds.clamp(&(q - grad / curvature)) - q
}
