//! Closed-loop testbed: a spring-anchored trocar ring, analytic shaft–ring
//! contact, joint torques from the contact force, and noisy trocar sensing.
//!
//! The ring is a flat annulus in the plane through its center with normal
//! along the insertion axis. The endoscope is a cylinder of radius
//! `shaft_radius` reaching back `shaft_length` from the tip. Contact is
//! resolved along the direction of least penetration: radially against the
//! lumen wall, or axially against the ring face.

use nalgebra::{DVector, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::force::ExternalTorques;
use crate::kinematics::{JointLimits, KinematicChain};

/// Command tolerance against the position limits, radians.
const LIMIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TrocarModel {
    pub rest_center: Vector3<f64>,
    pub rest_axis: Vector3<f64>,
    pub inner_radius: f64,
    /// Outer edge of the ring face; shafts crossing beyond it miss the trocar.
    pub outer_radius: f64,
    pub anchor_stiffness: f64,
    pub anchor_damping: f64,
    pub contact_stiffness: f64,
    pub effective_mass: f64,
}

impl TrocarModel {
    pub fn new(rest_center: Vector3<f64>, rest_axis: Vector3<f64>) -> Result<Self> {
        let model = Self {
            rest_center,
            rest_axis: Unit::new_normalize(rest_axis).into_inner(),
            ..Self::default()
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if (self.rest_axis.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::DirectionNotNormalized { norm: self.rest_axis.norm() });
        }
        let positive = [
            self.inner_radius,
            self.anchor_stiffness,
            self.contact_stiffness,
            self.effective_mass,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || !(self.anchor_damping >= 0.0) {
            return Err(Error::InvalidParameter("trocar radii, stiffnesses and mass must be positive".into()));
        }
        if !(self.outer_radius > self.inner_radius) {
            return Err(Error::InvalidParameter("outer_radius must exceed inner_radius".into()));
        }
        Ok(())
    }

    pub fn rest_state(&self) -> TrocarState {
        TrocarState {
            center: self.rest_center,
            velocity: Vector3::zeros(),
            axis: self.rest_axis,
        }
    }

    /// Spring potential plus kinetic energy.
    pub fn energy(&self, state: &TrocarState) -> f64 {
        0.5 * self.anchor_stiffness * (state.center - self.rest_center).norm_squared()
            + 0.5 * self.effective_mass * state.velocity.norm_squared()
    }
}

impl Default for TrocarModel {
    fn default() -> Self {
        Self {
            rest_center: Vector3::zeros(),
            rest_axis: Vector3::z(),
            inner_radius: 0.0035,
            outer_radius: 0.015,
            anchor_stiffness: 500.0,
            anchor_damping: 5.0,
            contact_stiffness: 5000.0,
            effective_mass: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrocarState {
    pub center: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Held at the rest axis; the anchor is translational only.
    pub axis: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndoscopeGeometry {
    pub shaft_radius: f64,
    pub shaft_length: f64,
}

impl Default for EndoscopeGeometry {
    fn default() -> Self {
        Self {
            shaft_radius: 0.002,
            shaft_length: 0.35,
        }
    }
}

impl EndoscopeGeometry {
    pub fn validate(&self, trocar: &TrocarModel) -> Result<()> {
        if !(self.shaft_radius > 0.0 && self.shaft_radius < trocar.inner_radius) {
            return Err(Error::InvalidParameter("shaft_radius must lie in (0, inner_radius)".into()));
        }
        if !(self.shaft_length > 0.0) {
            return Err(Error::InvalidParameter("shaft_length must be positive".into()));
        }
        Ok(())
    }

    /// Radial play of the shaft centerline inside the lumen.
    pub fn clearance(&self, trocar: &TrocarModel) -> f64 {
        trocar.inner_radius - self.shaft_radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactKind {
    None,
    /// Shaft pressing on the lumen wall.
    Wall,
    /// Tip pressing on the ring face.
    Face,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactResult {
    pub in_contact: bool,
    pub kind: ContactKind,
    pub force_on_scope: Vector3<f64>,
    pub force_on_trocar: Vector3<f64>,
    pub contact_point: Vector3<f64>,
    pub penetration: f64,
}

impl ContactResult {
    pub fn none(point: Vector3<f64>) -> Self {
        Self {
            in_contact: false,
            kind: ContactKind::None,
            force_on_scope: Vector3::zeros(),
            force_on_trocar: Vector3::zeros(),
            contact_point: point,
            penetration: 0.0,
        }
    }

    fn with_force(kind: ContactKind, force_on_scope: Vector3<f64>, point: Vector3<f64>, penetration: f64) -> Self {
        Self {
            in_contact: true,
            kind,
            force_on_scope,
            force_on_trocar: -force_on_scope,
            contact_point: point,
            penetration,
        }
    }
}

/// Shaft–ring contact for the scope at `tip` pointing along `axis`.
pub fn compute_contact(
    tip: &Vector3<f64>,
    axis: &Vector3<f64>,
    geom: &EndoscopeGeometry,
    state: &TrocarState,
    model: &TrocarModel,
) -> ContactResult {
    let normal = state.axis;
    let clearance = geom.clearance(model);
    let reach = model.outer_radius + geom.shaft_radius;
    let k = model.contact_stiffness;

    let back = tip - axis * geom.shaft_length;
    let s_tip = (tip - state.center).dot(&normal);
    let s_back = (back - state.center).dot(&normal);
    let radial_of = |p: &Vector3<f64>| {
        let rel = p - state.center;
        rel - normal * rel.dot(&normal)
    };

    // Penetration into the face, with the tip rounded off by the shaft radius.
    let face_depth = s_tip + geom.shaft_radius;

    let crossing = s_tip >= 0.0 && s_back < 0.0;
    if crossing {
        let lambda = s_tip / (s_tip - s_back);
        let point = tip + (back - tip) * lambda;
        let radial = radial_of(&point);
        let d = radial.norm();
        if d <= clearance || d >= reach {
            return ContactResult::none(point);
        }
        let wall_depth = d - clearance;
        return if wall_depth <= face_depth {
            ContactResult::with_force(ContactKind::Wall, -radial * (k * wall_depth / d), point, wall_depth)
        } else {
            ContactResult::with_force(ContactKind::Face, -normal * (k * face_depth), point, face_depth)
        };
    }

    // Tip approaching the face from the near side, including shafts parallel to the plane.
    if s_tip < 0.0 && face_depth > 0.0 && s_back <= s_tip {
        let radial = radial_of(tip);
        let d = radial.norm();
        if d <= clearance || d >= reach {
            return ContactResult::none(*tip);
        }
        let wall_depth = d - clearance;
        return if wall_depth <= face_depth {
            ContactResult::with_force(ContactKind::Wall, -radial * (k * wall_depth / d), *tip, wall_depth)
        } else {
            ContactResult::with_force(ContactKind::Face, -normal * (k * face_depth), *tip, face_depth)
        };
    }

    ContactResult::none(*tip)
}

/// Semi-implicit Euler step of the anchored ring.
pub fn trocar_step(state: &TrocarState, model: &TrocarModel, external_force: &Vector3<f64>, dt: f64) -> TrocarState {
    debug_assert!(dt > 0.0);
    let spring = (state.center - model.rest_center) * model.anchor_stiffness;
    let accel = (external_force - spring - state.velocity * model.anchor_damping) / model.effective_mass;
    let velocity = state.velocity + accel * dt;
    TrocarState {
        center: state.center + velocity * dt,
        velocity,
        axis: state.axis,
    }
}

/// `τ = J_lin(q, contact_point)ᵀ · force_on_scope`.
pub fn joint_external_torques(chain: &KinematicChain, q: &[f64], contact: &ContactResult) -> Result<ExternalTorques> {
    check_len(chain.dof(), q.len())?;
    if !contact.in_contact {
        return Ok(ExternalTorques::zeros(chain.dof()));
    }
    let jac = chain.linear_jacobian(q, &contact.contact_point)?;
    Ok(ExternalTorques(jac.tr_mul(&contact.force_on_scope)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub sigma_pos: f64,
    pub sigma_axis: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_pos: 0.001,
            sigma_axis: 0.0087,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_pos >= 0.0 && self.sigma_axis >= 0.0) {
            return Err(Error::InvalidParameter("noise sigmas must be non-negative".into()));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// A noisy reading of the trocar pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrocarMeasurement {
    pub center: Vector3<f64>,
    pub axis: Vector3<f64>,
}

/// Gaussian center noise per coordinate; the axis is tilted by
/// `|N(0, σ²)|` about a uniformly drawn perpendicular direction.
pub fn measure_trocar_pose<R: Rng + ?Sized>(state: &TrocarState, noise: &NoiseModel, rng: &mut R) -> TrocarMeasurement {
    let pos = Normal::new(0.0, noise.sigma_pos).expect("finite sigma");
    let ang = Normal::new(0.0, noise.sigma_axis).expect("finite sigma");
    let offset = Vector3::new(pos.sample(rng), pos.sample(rng), pos.sample(rng));
    let tilt: f64 = ang.sample(rng).abs();
    let azimuth: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    let axis = state.axis;
    let (u, v) = perpendicular_basis(&axis);
    let pivot = Unit::new_normalize(u * azimuth.cos() + v * azimuth.sin());
    let measured_axis = (UnitQuaternion::from_axis_angle(&pivot, tilt) * axis).normalize();
    TrocarMeasurement {
        center: state.center + offset,
        axis: measured_axis,
    }
}

/// Two unit vectors completing `axis` to an orthonormal frame.
pub fn perpendicular_basis(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = axis.cross(&helper).normalize();
    let v = axis.cross(&u);
    (u, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSettings {
    /// Control period, seconds.
    pub dt: f64,
    /// Contact integration substeps per control period.
    pub substeps: usize,
    /// Depth past the ring plane that counts as docked, meters.
    pub insertion_depth: f64,
    /// First-order joint tracking lag, seconds; zero tracks exactly.
    pub tracking_time_constant: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            dt: 0.005,
            substeps: 5,
            insertion_depth: 0.02,
            tracking_time_constant: 0.0,
        }
    }
}

impl SimSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.substeps == 0 || !(self.insertion_depth > 0.0) || !(self.tracking_time_constant >= 0.0) {
            return Err(Error::InvalidParameter("sim dt, substeps and insertion_depth must be positive".into()));
        }
        Ok(())
    }
}

/// What the controller sees after one control period, plus ground truth.
#[derive(Debug, Clone)]
pub struct Observation {
    pub q_c: DVector<f64>,
    pub tau_ext: ExternalTorques,
    pub measurement: TrocarMeasurement,
    pub contact: ContactResult,
    /// ‖force on the scope‖ at the end of the period, N.
    pub true_force_norm: f64,
    pub success: bool,
    /// Substeps of this period with an active contact.
    pub contact_substeps: usize,
    /// Substeps where the action and reaction forces were not exact negatives.
    pub action_reaction_violations: usize,
}

/// One docking trial's physical world.
#[derive(Debug, Clone)]
pub struct Simulation {
    chain: KinematicChain,
    limits: JointLimits,
    model: TrocarModel,
    geometry: EndoscopeGeometry,
    noise: NoiseModel,
    settings: SimSettings,
    trocar: TrocarState,
    q_c: DVector<f64>,
    rng: ChaCha8Rng,
}

impl Simulation {
    pub fn new(
        chain: KinematicChain,
        limits: JointLimits,
        model: TrocarModel,
        geometry: EndoscopeGeometry,
        noise: NoiseModel,
        settings: SimSettings,
        q0: DVector<f64>,
    ) -> Result<Self> {
        check_len(chain.dof(), limits.dof())?;
        check_len(chain.dof(), q0.len())?;
        limits.validate()?;
        model.validate()?;
        geometry.validate(&model)?;
        noise.validate()?;
        settings.validate()?;
        Ok(Self {
            trocar: model.rest_state(),
            rng: noise.rng(),
            chain,
            limits,
            model,
            geometry,
            noise,
            settings,
            q_c: q0,
        })
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    pub fn trocar(&self) -> &TrocarState {
        &self.trocar
    }

    pub fn model(&self) -> &TrocarModel {
        &self.model
    }

    pub fn geometry(&self) -> &EndoscopeGeometry {
        &self.geometry
    }

    pub fn settings(&self) -> &SimSettings {
        &self.settings
    }

    pub fn q_c(&self) -> &DVector<f64> {
        &self.q_c
    }

    pub fn trocar_displacement(&self) -> f64 {
        (self.trocar.center - self.model.rest_center).norm()
    }

    /// Observation of the current state without advancing time.
    pub fn observe(&mut self) -> Result<Observation> {
        let contact = self.contact_at(self.q_c.as_slice())?;
        self.finish_observation(contact, 0, 0)
    }

    /// Tracks `q_command` over one control period and integrates the ring.
    pub fn step(&mut self, q_command: &DVector<f64>) -> Result<Observation> {
        check_len(self.chain.dof(), q_command.len())?;
        for (i, &v) in q_command.iter().enumerate() {
            let (lo, hi) = (self.limits.q_min[i], self.limits.q_max[i]);
            if !(v >= lo - LIMIT_TOLERANCE && v <= hi + LIMIT_TOLERANCE) {
                return Err(Error::InfeasibleCommand { joint: i, value: v, lower: lo, upper: hi });
            }
        }

        let dt = self.settings.dt;
        let q_start = self.q_c.clone();
        let q_end = if self.settings.tracking_time_constant > 0.0 {
            let blend = 1.0 - (-dt / self.settings.tracking_time_constant).exp();
            &q_start + (q_command - &q_start) * blend
        } else {
            q_command.clone()
        };

        let substeps = self.settings.substeps;
        let h = dt / substeps as f64;
        let mut contact_substeps = 0;
        let mut violations = 0;
        for k in 1..=substeps {
            let frac = k as f64 / substeps as f64;
            let q = &q_start + (&q_end - &q_start) * frac;
            let contact = self.contact_at(q.as_slice())?;
            if contact.in_contact {
                contact_substeps += 1;
            }
            if contact.force_on_trocar + contact.force_on_scope != Vector3::zeros() {
                violations += 1;
            }
            self.trocar = trocar_step(&self.trocar, &self.model, &contact.force_on_trocar, h);
        }
        self.q_c = q_end;

        let contact = self.contact_at(self.q_c.as_slice())?;
        self.finish_observation(contact, contact_substeps, violations)
    }

    fn contact_at(&self, q: &[f64]) -> Result<ContactResult> {
        let pose = self.chain.pose(q)?;
        Ok(compute_contact(&pose.tip(), &pose.optical_axis(), &self.geometry, &self.trocar, &self.model))
    }

    fn finish_observation(&mut self, contact: ContactResult, contact_substeps: usize, violations: usize) -> Result<Observation> {
        let tau_ext = joint_external_torques(&self.chain, self.q_c.as_slice(), &contact)?;
        let measurement = measure_trocar_pose(&self.trocar, &self.noise, &mut self.rng);
        let success = self.is_docked()?;
        Ok(Observation {
            q_c: self.q_c.clone(),
            tau_ext,
            measurement,
            true_force_norm: contact.force_on_scope.norm(),
            contact,
            success,
            contact_substeps,
            action_reaction_violations: violations,
        })
    }

    /// Tip past the ring plane by the insertion depth and inside the clearance.
    pub fn is_docked(&self) -> Result<bool> {
        let tip = self.chain.tip_position(self.q_c.as_slice())?;
        let rel = tip - self.trocar.center;
        let depth = rel.dot(&self.trocar.axis);
        let radial = (rel - self.trocar.axis * depth).norm();
        Ok(depth >= self.settings.insertion_depth && radial < self.geometry.clearance(&self.model))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ring() -> (TrocarModel, TrocarState, EndoscopeGeometry) {
        let model = TrocarModel::default();
        (model.clone(), model.rest_state(), EndoscopeGeometry::default())
    }

    #[test]
    fn centered_shaft_has_no_contact() {
        let (model, state, geom) = ring();
        let c = compute_contact(&Vector3::new(0.0, 0.0, 0.01), &Vector3::z(), &geom, &state, &model);
        assert!(!c.in_contact);
        assert_eq!(c.force_on_scope, Vector3::zeros());
    }

    #[test]
    fn wall_contact_magnitude_and_direction() {
        let (model, state, geom) = ring();
        let offset = geom.clearance(&model) + 0.001;
        let tip = Vector3::new(offset, 0.0, 0.01);
        let c = compute_contact(&tip, &Vector3::z(), &geom, &state, &model);
        assert!(c.in_contact);
        assert_eq!(c.kind, ContactKind::Wall);
        assert_relative_eq!(c.force_on_scope, Vector3::new(-5.0, 0.0, 0.0), epsilon = 1e-9);
        assert_relative_eq!(c.penetration, 0.001, epsilon = 1e-12);
        assert_relative_eq!(c.contact_point, Vector3::new(offset, 0.0, 0.0), epsilon = 1e-15);
        assert_eq!(c.force_on_trocar, -c.force_on_scope);
    }

    #[test]
    fn face_contact_pushes_back() {
        let (model, state, geom) = ring();
        // Tip just short of the plane, well outside the lumen.
        let tip = Vector3::new(0.008, 0.0, -0.001);
        let c = compute_contact(&tip, &Vector3::z(), &geom, &state, &model);
        assert_eq!(c.kind, ContactKind::Face);
        assert_relative_eq!(c.force_on_scope, Vector3::new(0.0, 0.0, -5.0), epsilon = 1e-9);
        // Same lateral offset, tip 1 mm past the plane.
        let c = compute_contact(&Vector3::new(0.008, 0.0, 0.001), &Vector3::z(), &geom, &state, &model);
        assert_eq!(c.kind, ContactKind::Face);
        assert_relative_eq!(c.penetration, 0.003, epsilon = 1e-12);
    }

    #[test]
    fn parallel_shaft_uses_face_branch() {
        let (model, state, geom) = ring();
        let tip = Vector3::new(0.008, 0.0, -0.001);
        let c = compute_contact(&tip, &Vector3::x(), &geom, &state, &model);
        assert!(c.in_contact);
        let far = compute_contact(&Vector3::new(0.008, 0.0, -0.01), &Vector3::x(), &geom, &state, &model);
        assert!(!far.in_contact);
    }

    #[test]
    fn far_from_ring_no_contact() {
        let (model, state, geom) = ring();
        for tip in [Vector3::new(0.0, 0.0, -0.1), Vector3::new(0.05, 0.0, 0.01)] {
            assert!(!compute_contact(&tip, &Vector3::z(), &geom, &state, &model).in_contact);
        }
    }

    #[test]
    fn rest_is_equilibrium() {
        let model = TrocarModel::default();
        let state = model.rest_state();
        assert_eq!(trocar_step(&state, &model, &Vector3::zeros(), 0.001), state);
    }

    #[test]
    fn spring_equilibrium_under_constant_force() {
        let model = TrocarModel::default();
        let force = Vector3::new(1.0, -2.0, 0.5);
        let mut state = model.rest_state();
        for _ in 0..5000 {
            state = trocar_step(&state, &model, &force, 0.001);
        }
        let offset = state.center - model.rest_center;
        assert!((offset - force / model.anchor_stiffness).norm() < 1e-6);
    }

    #[test]
    fn free_ring_energy_never_increases() {
        let model = TrocarModel::default();
        let mut state = model.rest_state();
        state.center += Vector3::new(0.004, -0.002, 0.001);
        state.velocity = Vector3::new(-0.05, 0.02, 0.0);
        let mut energy = model.energy(&state);
        for _ in 0..3000 {
            state = trocar_step(&state, &model, &Vector3::zeros(), 0.001);
            let next = model.energy(&state);
            assert!(next <= energy);
            energy = next;
        }
    }

    #[test]
    fn torques_from_contact() {
        let chain = KinematicChain::single_link(1.0);
        let contact = ContactResult::with_force(ContactKind::Wall, Vector3::y(), Vector3::x(), 0.0);
        let tau = joint_external_torques(&chain, &[0.0], &contact).unwrap();
        assert_relative_eq!(tau.0[0], 1.0, epsilon = 1e-15);
        let none = joint_external_torques(&chain, &[0.0], &ContactResult::none(Vector3::x())).unwrap();
        assert_eq!(none.0[0], 0.0);
    }

    #[test]
    fn zero_noise_is_exact_and_seeded_noise_repeats() {
        let model = TrocarModel::new(Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0, 1.0, 0.0)).unwrap();
        let state = model.rest_state();
        let quiet = NoiseModel { sigma_pos: 0.0, sigma_axis: 0.0, seed: 9 };
        let m = measure_trocar_pose(&state, &quiet, &mut quiet.rng());
        assert_eq!(m.center, state.center);
        assert_relative_eq!(m.axis, state.axis, epsilon = 1e-15);

        let noisy = NoiseModel { seed: 42, ..Default::default() };
        let (mut a, mut b) = (noisy.rng(), noisy.rng());
        for _ in 0..50 {
            assert_eq!(measure_trocar_pose(&state, &noisy, &mut a), measure_trocar_pose(&state, &noisy, &mut b));
        }
    }

    #[test]
    fn axis_tilt_is_unit_and_small() {
        let model = TrocarModel::default();
        let state = model.rest_state();
        let noise = NoiseModel { seed: 3, ..Default::default() };
        let mut rng = noise.rng();
        for _ in 0..200 {
            let m = measure_trocar_pose(&state, &noise, &mut rng);
            assert_relative_eq!(m.axis.norm(), 1.0, epsilon = 1e-12);
            assert!(m.axis.angle(&state.axis) < 8.0 * noise.sigma_axis);
        }
    }

    #[test]
    fn infeasible_command_rejected() {
        let chain = KinematicChain::planar_2link();
        let limits = JointLimits::symmetric(2, 1.0, 1.0);
        let mut sim = Simulation::new(
            chain,
            limits,
            TrocarModel::new(Vector3::new(5.0, 5.0, 0.0), Vector3::x()).unwrap(),
            EndoscopeGeometry::default(),
            NoiseModel::default(),
            SimSettings::default(),
            DVector::zeros(2),
        )
        .unwrap();
        let err = sim.step(&DVector::from_column_slice(&[0.0, 1.5])).unwrap_err();
        assert!(err.to_string().contains("infeasible command"));
    }
}
