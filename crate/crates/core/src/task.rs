//! Sensed task parameters and the five docking cost terms.
//!
//! Terms one to four are squared norms and are exposed to the solver as
//! weighted residual vectors. The force-feedback term is an unsquared
//! distance, smoothed as `sqrt(d² + ε²) − ε`, and contributes its exact
//! Hessian with respect to the tip instead of a residual.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{check_len, Error, Result};
use crate::kinematics::KinematicChain;

/// Finite-difference step for the optical-axis Jacobian.
pub const AXIS_FD_STEP: f64 = 1e-6;

pub const DEFAULT_EPSILON_C5: f64 = 1e-4;

/// Default weights for (axis line, goal, alignment, joint velocity, force feedback).
pub const DEFAULT_WEIGHTS: [f64; 5] = [20.0, 10.0, 10.0, 1.0, 50.0];

const UNIT_TOLERANCE: f64 = 1e-9;

/// Identifies one of the five cost terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostTerm {
    /// Tip to the insertion line.
    AxisLine,
    /// Tip to the goal point.
    Goal,
    /// Optical axis to the insertion direction.
    Alignment,
    /// Joint motion since the previous cycle.
    JointVelocity,
    /// Tip to the admittance reference.
    ForceFeedback,
}

impl CostTerm {
    pub const ALL: [CostTerm; 5] = [
        CostTerm::AxisLine,
        CostTerm::Goal,
        CostTerm::Alignment,
        CostTerm::JointVelocity,
        CostTerm::ForceFeedback,
    ];

    /// One-based index as used in config files and reports.
    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index.wrapping_sub(1))
            .copied()
            .ok_or(Error::CostIndexOutOfRange(index))
    }

    pub fn index(self) -> usize {
        self as usize + 1
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// The sensed-parameter vector for one control cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams {
    /// Measured trocar center, a point on the insertion line.
    pub axis_anchor: Vector3<f64>,
    /// Insertion direction, unit length.
    pub insertion_axis: Vector3<f64>,
    pub goal: Vector3<f64>,
    /// Admittance reference `r`.
    pub admittance_ref: Vector3<f64>,
    pub q_prev: DVector<f64>,
    pub weights: [f64; 5],
    pub epsilon_c5: f64,
    /// Whether the force-feedback term is part of the objective this cycle.
    pub ff_enabled: bool,
}

impl TaskParams {
    pub fn new(
        axis_anchor: Vector3<f64>,
        insertion_axis: Vector3<f64>,
        goal: Vector3<f64>,
        q_prev: DVector<f64>,
    ) -> Result<Self> {
        let params = Self {
            axis_anchor,
            insertion_axis,
            goal,
            admittance_ref: goal,
            q_prev,
            weights: DEFAULT_WEIGHTS,
            epsilon_c5: DEFAULT_EPSILON_C5,
            ff_enabled: false,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn with_weights(mut self, weights: [f64; 5]) -> Result<Self> {
        self.weights = weights;
        self.validate()?;
        Ok(self)
    }

    pub fn with_force_feedback(mut self, reference: Vector3<f64>) -> Self {
        self.admittance_ref = reference;
        self.ff_enabled = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let norm = self.insertion_axis.norm();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::DirectionNotNormalized { norm });
        }
        if let Some(i) = self.weights.iter().position(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter(format!("weight w{} must be positive", i + 1)));
        }
        if !(self.epsilon_c5 > 0.0) {
            return Err(Error::InvalidParameter("epsilon_c5 must be positive".into()));
        }
        let finite = self.axis_anchor.iter().chain(self.goal.iter()).chain(self.admittance_ref.iter()).all(|v| v.is_finite())
            && self.q_prev.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("task parameters must be finite".into()));
        }
        Ok(())
    }

    /// Whether `term` contributes to the objective.
    pub fn is_active(&self, term: CostTerm) -> bool {
        term != CostTerm::ForceFeedback || self.ff_enabled
    }
}

/// Foot of the perpendicular from `p` onto the line through `anchor` along `dir`.
pub fn nearest_point_on_line(p: &Vector3<f64>, anchor: &Vector3<f64>, dir: &Vector3<f64>) -> Result<Vector3<f64>> {
    let norm = dir.norm();
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::DirectionNotNormalized { norm });
    }
    Ok(anchor + dir * (p - anchor).dot(dir))
}

/// Smoothed distance `sqrt(d² + ε²) − ε`.
pub fn smoothed_norm(d: f64, epsilon: f64) -> f64 {
    // Written as d² / (s + ε) to avoid cancellation for d ≪ ε.
    let s = (d * d + epsilon * epsilon).sqrt();
    d * d / (s + epsilon)
}

/// Value and gradient of a single term (unweighted).
pub fn evaluate_cost(
    term: CostTerm,
    q: &DVector<f64>,
    params: &TaskParams,
    chain: &KinematicChain,
) -> Result<(f64, DVector<f64>)> {
    let eval = TermEvaluation::new(chain, q, params)?;
    Ok(eval.term(term))
}

/// Same as [`evaluate_cost`] with a one-based term index.
pub fn evaluate_cost_index(
    index: usize,
    q: &DVector<f64>,
    params: &TaskParams,
    chain: &KinematicChain,
) -> Result<(f64, DVector<f64>)> {
    evaluate_cost(CostTerm::from_index(index)?, q, params, chain)
}

/// Per-term values and gradients with the weighted total.
#[derive(Debug, Clone)]
pub struct CostReport {
    /// Unweighted term values; inactive terms report zero.
    pub values: [f64; 5],
    pub total: f64,
    pub gradient: DVector<f64>,
    /// Row i is the unweighted gradient of term i + 1.
    pub term_gradients: DMatrix<f64>,
}

pub fn total_objective(q: &DVector<f64>, params: &TaskParams, chain: &KinematicChain) -> Result<CostReport> {
    let eval = TermEvaluation::new(chain, q, params)?;
    Ok(eval.report())
}

/// Stacked weighted residuals, their Jacobian and the exact curvature of
/// the smoothed force-feedback term.
#[derive(Debug, Clone)]
pub struct GaussNewtonModel {
    pub total: f64,
    pub gradient: DVector<f64>,
    /// `√wᵢ`-scaled residuals of the squared terms, stacked in term order.
    pub residuals: DVector<f64>,
    pub residual_jacobian: DMatrix<f64>,
    /// `w₅ Jₑᵀ ∇²ₑc₅ Jₑ`, present when the force-feedback term is active.
    pub force_feedback_curvature: Option<DMatrix<f64>>,
}

impl GaussNewtonModel {
    /// `2 JᵣᵀJᵣ + C₅ + λI`, the Gauss-Newton approximation of the Hessian of the total.
    pub fn hessian(&self, damping: f64) -> DMatrix<f64> {
        let n = self.gradient.len();
        let mut h = self.residual_jacobian.tr_mul(&self.residual_jacobian) * 2.0;
        if let Some(c5) = &self.force_feedback_curvature {
            h += c5;
        }
        for i in 0..n {
            h[(i, i)] += damping;
        }
        h
    }
}

/// Weighted total only; skips the Jacobians.
pub fn objective_value(q: &DVector<f64>, params: &TaskParams, chain: &KinematicChain) -> Result<f64> {
    check_len(chain.dof(), q.len())?;
    check_len(chain.dof(), params.q_prev.len())?;
    let pose = chain.pose(q.as_slice())?;
    let tip = pose.tip();
    let g = &params.insertion_axis;
    let rel = tip - params.axis_anchor;
    let w = &params.weights;
    let mut total = w[0] * (rel - g * rel.dot(g)).norm_squared()
        + w[1] * (tip - params.goal).norm_squared()
        + w[2] * (pose.optical_axis() - g).norm_squared()
        + w[3] * (q - &params.q_prev).norm_squared();
    if params.ff_enabled {
        total += w[4] * smoothed_norm((tip - params.admittance_ref).norm(), params.epsilon_c5);
    }
    Ok(total)
}

pub fn gauss_newton_model(q: &DVector<f64>, params: &TaskParams, chain: &KinematicChain) -> Result<GaussNewtonModel> {
    let eval = TermEvaluation::new(chain, q, params)?;
    Ok(eval.gauss_newton())
}

/// Everything the terms need at one configuration: tip, axis and their Jacobians.
struct TermEvaluation<'a> {
    params: &'a TaskParams,
    q: &'a DVector<f64>,
    tip: Vector3<f64>,
    axis: Vector3<f64>,
    tip_jacobian: DMatrix<f64>,
    axis_jacobian: DMatrix<f64>,
}

impl<'a> TermEvaluation<'a> {
    fn new(chain: &KinematicChain, q: &'a DVector<f64>, params: &'a TaskParams) -> Result<Self> {
        check_len(chain.dof(), q.len())?;
        check_len(chain.dof(), params.q_prev.len())?;
        let pose = chain.pose(q.as_slice())?;
        let tip = pose.tip();
        Ok(Self {
            params,
            q,
            tip,
            axis: pose.optical_axis(),
            tip_jacobian: pose.linear_jacobian(&tip),
            axis_jacobian: axis_jacobian_fd(chain, q)?,
        })
    }

    fn line_residual(&self) -> Vector3<f64> {
        let g = &self.params.insertion_axis;
        let rel = self.tip - self.params.axis_anchor;
        rel - g * rel.dot(g)
    }

    fn line_projector(&self) -> Matrix3<f64> {
        let g = &self.params.insertion_axis;
        Matrix3::identity() - g * g.transpose()
    }

    fn c5_parts(&self) -> (Vector3<f64>, f64) {
        let diff = self.tip - self.params.admittance_ref;
        let s = (diff.norm_squared() + self.params.epsilon_c5.powi(2)).sqrt();
        (diff, s)
    }

    /// Unweighted value and gradient.
    fn term(&self, term: CostTerm) -> (f64, DVector<f64>) {
        match term {
            CostTerm::AxisLine => {
                // The projector is idempotent, so Jᵀ P ρ = Jᵀ ρ.
                let rho = self.line_residual();
                (rho.norm_squared(), self.tip_jacobian.tr_mul(&rho) * 2.0)
            }
            CostTerm::Goal => {
                let rho = self.tip - self.params.goal;
                (rho.norm_squared(), self.tip_jacobian.tr_mul(&rho) * 2.0)
            }
            CostTerm::Alignment => {
                let rho = self.axis - self.params.insertion_axis;
                (rho.norm_squared(), self.axis_jacobian.tr_mul(&rho) * 2.0)
            }
            CostTerm::JointVelocity => {
                let rho = self.q - &self.params.q_prev;
                (rho.norm_squared(), rho * 2.0)
            }
            CostTerm::ForceFeedback => {
                let (diff, s) = self.c5_parts();
                (
                    smoothed_norm(diff.norm(), self.params.epsilon_c5),
                    self.tip_jacobian.tr_mul(&(diff / s)),
                )
            }
        }
    }

    fn report(&self) -> CostReport {
        let n = self.q.len();
        let mut values = [0.0; 5];
        let mut term_gradients = DMatrix::zeros(5, n);
        let mut gradient = DVector::zeros(n);
        let mut total = 0.0;
        for term in CostTerm::ALL {
            if !self.params.is_active(term) {
                continue;
            }
            let (value, grad) = self.term(term);
            let w = self.params.weights[term.slot()];
            values[term.slot()] = value;
            total += w * value;
            gradient.axpy(w, &grad, 1.0);
            term_gradients.row_mut(term.slot()).copy_from(&grad.transpose());
        }
        CostReport {
            values,
            total,
            gradient,
            term_gradients,
        }
    }

    fn gauss_newton(&self) -> GaussNewtonModel {
        let n = self.q.len();
        let w = &self.params.weights;
        let rows = 9 + n;
        let mut residuals = DVector::zeros(rows);
        let mut jac = DMatrix::zeros(rows, n);

        let sw = w[0].sqrt();
        residuals.fixed_rows_mut::<3>(0).copy_from(&(self.line_residual() * sw));
        jac.rows_mut(0, 3).copy_from(&(self.line_projector() * &self.tip_jacobian * sw));

        let sw = w[1].sqrt();
        residuals.fixed_rows_mut::<3>(3).copy_from(&((self.tip - self.params.goal) * sw));
        jac.rows_mut(3, 3).copy_from(&(&self.tip_jacobian * sw));

        let sw = w[2].sqrt();
        residuals.fixed_rows_mut::<3>(6).copy_from(&((self.axis - self.params.insertion_axis) * sw));
        jac.rows_mut(6, 3).copy_from(&(&self.axis_jacobian * sw));

        let sw = w[3].sqrt();
        residuals.rows_mut(9, n).copy_from(&((self.q - &self.params.q_prev) * sw));
        for i in 0..n {
            jac[(9 + i, i)] = sw;
        }

        let mut total = residuals.norm_squared();
        let mut gradient = jac.tr_mul(&residuals) * 2.0;
        let mut curvature = None;
        if self.params.ff_enabled {
            let (diff, s) = self.c5_parts();
            let eps = self.params.epsilon_c5;
            total += w[4] * smoothed_norm(diff.norm(), eps);
            gradient += self.tip_jacobian.tr_mul(&(diff * (w[4] / s)));
            let hess_tip = Matrix3::identity() / s - diff * diff.transpose() / (s * s * s);
            curvature = Some(self.tip_jacobian.tr_mul(&(hess_tip * &self.tip_jacobian)) * w[4]);
        }

        GaussNewtonModel {
            total,
            gradient,
            residuals,
            residual_jacobian: jac,
            force_feedback_curvature: curvature,
        }
    }
}

/// 3×n Jacobian of the optical axis by central differences.
fn axis_jacobian_fd(chain: &KinematicChain, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = q.len();
    let mut jac = DMatrix::zeros(3, n);
    let mut probe = q.clone_owned();
    for j in 0..n {
        let base = probe[j];
        probe[j] = base + AXIS_FD_STEP;
        let plus = chain.optical_axis(probe.as_slice())?;
        probe[j] = base - AXIS_FD_STEP;
        let minus = chain.optical_axis(probe.as_slice())?;
        probe[j] = base;
        jac.fixed_view_mut::<3, 1>(0, j)
            .copy_from(&((plus - minus) / (2.0 * AXIS_FD_STEP)));
    }
    Ok(jac)
}
