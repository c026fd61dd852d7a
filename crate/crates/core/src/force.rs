//! Tip-force estimation from joint torques, and the admittance law that
//! turns the estimate into the reference point of the force-feedback term.

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::kinematics::KinematicChain;

/// Singular values below this fraction of the largest are treated as zero
/// when no damping is requested.
const RANK_TOLERANCE: f64 = 1e-12;

/// Joint torques attributed to contact with the environment, N·m.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalTorques(pub DVector<f64>);

impl ExternalTorques {
    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceEstimate {
    /// Estimated force acting on the scope at the tip, N.
    pub f_ext: Vector3<f64>,
    /// `‖Jᵀf − τ‖`, N·m.
    pub residual: f64,
    /// Smallest singular value of the linear Jacobian (zero when n < 3).
    pub conditioning: f64,
}

impl ForceEstimate {
    pub fn zero() -> Self {
        Self {
            f_ext: Vector3::zeros(),
            residual: 0.0,
            conditioning: 0.0,
        }
    }
}

/// Damped least-squares solution of `J_linᵀ f = τ` at the tip.
///
/// With singular value decomposition `J = U Σ Vᵀ` this is
/// `f = U diag(σ / (σ² + δ)) Vᵀ τ`, equal to `(J Jᵀ + δI)⁻¹ J τ`, where
/// `δ = damping · σ_max²`. Zero damping gives the minimum-norm
/// least-squares force.
pub fn estimate_tip_force(chain: &KinematicChain, q_c: &[f64], tau: &ExternalTorques, damping: f64) -> Result<ForceEstimate> {
    check_len(chain.dof(), tau.0.len())?;
    if !(damping >= 0.0) {
        return Err(Error::InvalidParameter("damping must be non-negative".into()));
    }
    let pose = chain.pose(q_c)?;
    let jac = pose.linear_jacobian(&pose.tip());
    let svd = jac.clone().svd(true, true);
    let (u, v_t) = (svd.u.as_ref().expect("u requested"), svd.v_t.as_ref().expect("v_t requested"));
    let sigma_max = svd.singular_values.max();
    if !(sigma_max > 0.0) {
        return Err(Error::ForceUnobservable);
    }
    let delta = damping * sigma_max * sigma_max;

    let projected = v_t * &tau.0;
    let mut f = Vector3::zeros();
    for (k, &sigma) in svd.singular_values.iter().enumerate() {
        let gain = if delta > 0.0 {
            sigma / (sigma * sigma + delta)
        } else if sigma > RANK_TOLERANCE * sigma_max {
            1.0 / sigma
        } else {
            0.0
        };
        f += u.column(k).fixed_rows::<3>(0) * (gain * projected[k]);
    }

    let conditioning = if chain.dof() < 3 { 0.0 } else { svd.singular_values.min() };
    Ok(ForceEstimate {
        f_ext: f,
        residual: (jac.tr_mul(&f) - &tau.0).norm(),
        conditioning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmittanceGains {
    /// Displacement per unit force, m/N.
    pub gain_alpha: f64,
    /// Per-cycle low-pass coefficient in [0, 1).
    pub filter_beta: f64,
    /// Forces below this magnitude produce no displacement, N.
    pub force_deadband: f64,
}

impl Default for AdmittanceGains {
    fn default() -> Self {
        Self {
            gain_alpha: 0.005,
            filter_beta: 0.9,
            force_deadband: 0.5,
        }
    }
}

impl AdmittanceGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain_alpha >= 0.0) {
            return Err(Error::InvalidParameter("gain_alpha must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.filter_beta) {
            return Err(Error::InvalidParameter("filter_beta must lie in [0, 1)".into()));
        }
        if !(self.force_deadband >= 0.0) {
            return Err(Error::InvalidParameter("force_deadband must be non-negative".into()));
        }
        Ok(())
    }
}

/// Proportional admittance on the filtered, deadbanded force, anchored at
/// the current tip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmittanceState {
    pub r: Vector3<f64>,
    pub f_filtered: Vector3<f64>,
    pub gains: AdmittanceGains,
}

impl AdmittanceState {
    pub fn new(tip: Vector3<f64>, gains: AdmittanceGains) -> Result<Self> {
        gains.validate()?;
        Ok(Self {
            r: tip,
            f_filtered: Vector3::zeros(),
            gains,
        })
    }

    /// Filtered force with the deadband removed from its magnitude.
    pub fn deadbanded_force(&self) -> Vector3<f64> {
        deadband(&self.f_filtered, self.gains.force_deadband)
    }

    /// True while the admittance asks for a nonzero displacement.
    pub fn is_engaged(&self) -> bool {
        self.gains.gain_alpha > 0.0 && self.deadbanded_force() != Vector3::zeros()
    }

    pub fn update(&self, tip: &Vector3<f64>, estimate: &ForceEstimate, dt: f64) -> Self {
        debug_assert!(dt > 0.0);
        let beta = self.gains.filter_beta;
        let f_filtered = self.f_filtered * beta + estimate.f_ext * (1.0 - beta);
        let r = tip + deadband(&f_filtered, self.gains.force_deadband) * self.gains.gain_alpha;
        Self {
            r,
            f_filtered,
            gains: self.gains,
        }
    }
}

fn deadband(f: &Vector3<f64>, band: f64) -> Vector3<f64> {
    let magnitude = f.norm();
    if magnitude <= band {
        Vector3::zeros()
    } else {
        f * ((magnitude - band) / magnitude)
    }
}
