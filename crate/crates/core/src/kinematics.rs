//! Serial revolute chains carrying an endoscope.
//!
//! Each joint is described by an explicit origin offset, a fixed orientation
//! offset and a rotation axis in its local frame. The chain ends in a tool
//! frame whose origin is the endoscope tip and whose local axis is the
//! optical axis of the scope.

use nalgebra::{DMatrix, DVector, Matrix3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{check_len, Error, Result};

/// Quaternion products between renormalizations.
const RENORMALIZE_EVERY: usize = 16;

/// One revolute joint.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    /// Translation from the parent frame, meters.
    pub origin: Vector3<f64>,
    /// Fixed rotation from the parent frame, applied before the joint motion.
    pub orientation: UnitQuaternion<f64>,
    /// Rotation axis in the joint frame.
    pub axis: Unit<Vector3<f64>>,
}

impl JointSpec {
    pub fn new(origin: Vector3<f64>, orientation: UnitQuaternion<f64>, axis: Vector3<f64>) -> Result<Self> {
        Ok(Self {
            origin,
            orientation,
            axis: unit(axis, "joint axis")?,
        })
    }

    /// Joint with identity orientation offset.
    pub fn revolute(origin: [f64; 3], axis: [f64; 3]) -> Result<Self> {
        Self::new(origin.into(), UnitQuaternion::identity(), axis.into())
    }
}

fn unit(v: Vector3<f64>, what: &str) -> Result<Unit<Vector3<f64>>> {
    let norm = v.norm();
    if !norm.is_finite() || norm < 1e-9 {
        return Err(Error::InvalidParameter(format!("{what} has zero or non-finite length")));
    }
    Ok(Unit::new_normalize(v))
}

/// Position and orientation of a frame in the base frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl Frame {
    fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }
}

/// A serial revolute robot with an endoscope tool.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    joints: Vec<JointSpec>,
    tool_tip_offset: Vector3<f64>,
    tool_axis_local: Unit<Vector3<f64>>,
}

impl KinematicChain {
    pub fn new(joints: Vec<JointSpec>, tool_tip_offset: Vector3<f64>, tool_axis_local: Vector3<f64>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::InvalidParameter("chain needs at least one joint".into()));
        }
        Ok(Self {
            joints,
            tool_tip_offset,
            tool_axis_local: unit(tool_axis_local, "tool axis")?,
        })
    }

    /// Seven-joint arm with nominal LBR-Med-like link lengths and a straight
    /// endoscope along the flange z axis.
    ///
    /// The link offsets and the 0.355 m scope length are nominal values, not
    /// measured ones. Override with a chain file when real geometry is known.
    pub fn lbr_med7() -> Self {
        let spec = [
            ([0.0, 0.0, 0.1575], [0.0, 0.0, 1.0]),
            ([0.0, 0.0, 0.2025], [0.0, 1.0, 0.0]),
            ([0.0, 0.0, 0.2045], [0.0, 0.0, 1.0]),
            ([0.0, 0.0, 0.2155], [0.0, -1.0, 0.0]),
            ([0.0, 0.0, 0.1845], [0.0, 0.0, 1.0]),
            ([0.0, 0.0, 0.2155], [0.0, 1.0, 0.0]),
            ([0.0, 0.0, 0.0810], [0.0, 0.0, 1.0]),
        ];
        let joints = spec
            .iter()
            .map(|&(o, a)| JointSpec::revolute(o, a).expect("static chain"))
            .collect();
        Self::new(joints, Vector3::new(0.0, 0.0, 0.045 + 0.355), Vector3::z()).expect("static chain")
    }

    /// Two unit links in the xy plane, both rotating about z.
    pub fn planar_2link() -> Self {
        let joints = vec![
            JointSpec::revolute([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]).unwrap(),
            JointSpec::revolute([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]).unwrap(),
        ];
        Self::new(joints, Vector3::new(1.0, 0.0, 0.0), Vector3::x()).unwrap()
    }

    /// One joint about z with the tip at `length` along x.
    pub fn single_link(length: f64) -> Self {
        let joints = vec![JointSpec::revolute([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]).unwrap()];
        Self::new(joints, Vector3::new(length, 0.0, 0.0), Vector3::x()).unwrap()
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn tool_tip_offset(&self) -> &Vector3<f64> {
        &self.tool_tip_offset
    }

    pub fn tool_axis_local(&self) -> &Unit<Vector3<f64>> {
        &self.tool_axis_local
    }

    pub fn with_tool(mut self, tip_offset: Vector3<f64>, axis_local: Vector3<f64>) -> Result<Self> {
        self.tool_tip_offset = tip_offset;
        self.tool_axis_local = unit(axis_local, "tool axis")?;
        Ok(self)
    }

    /// Frames of every joint (after its motion) followed by the tool frame.
    pub fn forward_kinematics(&self, q: &[f64]) -> Result<Vec<Frame>> {
        Ok(self.pose(q)?.frames)
    }

    pub fn tip_position(&self, q: &[f64]) -> Result<Vector3<f64>> {
        Ok(self.pose(q)?.tip())
    }

    pub fn optical_axis(&self, q: &[f64]) -> Result<Vector3<f64>> {
        Ok(self.pose(q)?.optical_axis())
    }

    /// 3×n linear Jacobian of a point rigidly attached to the tool body.
    pub fn linear_jacobian(&self, q: &[f64], attachment_point: &Vector3<f64>) -> Result<DMatrix<f64>> {
        Ok(self.pose(q)?.linear_jacobian(attachment_point))
    }

    /// Full forward pass, keeping the world joint origins and axes needed by
    /// Jacobian queries.
    pub fn pose(&self, q: &[f64]) -> Result<ChainPose> {
        check_len(self.dof(), q.len())?;
        let n = self.dof();
        let mut frames = Vec::with_capacity(n + 1);
        let mut joint_origins = Vec::with_capacity(n);
        let mut joint_axes = Vec::with_capacity(n);

        let mut current = Frame::identity();
        let mut products = 0;
        for (joint, &angle) in self.joints.iter().zip(q) {
            current.position += current.rotation * joint.origin;
            current.rotation *= joint.orientation;
            joint_origins.push(current.position);
            joint_axes.push(current.rotation * joint.axis.into_inner());
            current.rotation *= UnitQuaternion::from_axis_angle(&joint.axis, angle);
            products += 2;
            if products >= RENORMALIZE_EVERY {
                current.rotation.renormalize();
                products = 0;
            }
            frames.push(current);
        }
        frames.push(Frame {
            position: current.position + current.rotation * self.tool_tip_offset,
            rotation: current.rotation,
        });

        Ok(ChainPose {
            frames,
            joint_origins,
            joint_axes,
            tool_axis_local: self.tool_axis_local.into_inner(),
        })
    }

    /// Load a chain from a JSON document (see [`ChainDocument`]).
    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: ChainDocument = serde_json::from_str(text)?;
        doc.try_into()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_document(&self) -> ChainDocument {
        ChainDocument {
            joints: self
                .joints
                .iter()
                .map(|j| {
                    let (r, p, y) = j.orientation.euler_angles();
                    JointDocument {
                        origin: j.origin.into(),
                        orientation_rpy: [r, p, y],
                        axis: j.axis.into_inner().into(),
                    }
                })
                .collect(),
            tool_tip_offset: self.tool_tip_offset.into(),
            tool_axis: self.tool_axis_local.into_inner().into(),
        }
    }
}

/// Result of one forward-kinematics pass.
#[derive(Debug, Clone)]
pub struct ChainPose {
    frames: Vec<Frame>,
    joint_origins: Vec<Vector3<f64>>,
    joint_axes: Vec<Vector3<f64>>,
    tool_axis_local: Vector3<f64>,
}

impl ChainPose {
    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn tool_frame(&self) -> &Frame {
        self.frames.last().expect("tool frame present")
    }

    /// Endoscope tip, e(q).
    pub fn tip(&self) -> Vector3<f64> {
        self.tool_frame().position
    }

    /// Optical axis a(q), unit length.
    pub fn optical_axis(&self) -> Vector3<f64> {
        (self.tool_frame().rotation * self.tool_axis_local).normalize()
    }

    pub fn joint_origins(&self) -> &[Vector3<f64>] {
        &self.joint_origins
    }

    pub fn joint_axes(&self) -> &[Vector3<f64>] {
        &self.joint_axes
    }

    /// Column j is `axis_j × (point − origin_j)`.
    pub fn linear_jacobian(&self, point: &Vector3<f64>) -> DMatrix<f64> {
        let n = self.joint_axes.len();
        let mut jac = DMatrix::zeros(3, n);
        for (j, (axis, origin)) in self.joint_axes.iter().zip(&self.joint_origins).enumerate() {
            jac.fixed_view_mut::<3, 1>(0, j).copy_from(&axis.cross(&(point - origin)));
        }
        jac
    }
}

/// Joint position and velocity limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub qdot_max: Vec<f64>,
}

impl JointLimits {
    pub fn new(q_min: Vec<f64>, q_max: Vec<f64>, qdot_max: Vec<f64>) -> Result<Self> {
        let limits = Self { q_min, q_max, qdot_max };
        limits.validate()?;
        Ok(limits)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q_min.len();
        check_len(n, self.q_max.len())?;
        check_len(n, self.qdot_max.len())?;
        for i in 0..n {
            if !(self.q_min[i] < self.q_max[i]) {
                return Err(Error::InvalidParameter(format!("q_min[{i}] must be below q_max[{i}]")));
            }
            if !(self.qdot_max[i] > 0.0) {
                return Err(Error::InvalidParameter(format!("qdot_max[{i}] must be positive")));
            }
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.q_min.len()
    }

    /// Index of the first coordinate outside the position limits.
    pub fn violation(&self, q: &[f64]) -> Option<usize> {
        q.iter()
            .zip(self.q_min.iter().zip(&self.q_max))
            .position(|(v, (lo, hi))| !(*v >= *lo && *v <= *hi))
    }

    /// Nominal LBR Med 7 limits with velocity scaled by `velocity_scale`.
    pub fn lbr_med7(velocity_scale: f64) -> Self {
        let deg = std::f64::consts::PI / 180.0;
        let pos = [170.0, 120.0, 170.0, 120.0, 170.0, 120.0, 175.0];
        let vel = [85.0, 85.0, 100.0, 75.0, 130.0, 135.0, 135.0];
        Self {
            q_min: pos.iter().map(|p| -p * deg).collect(),
            q_max: pos.iter().map(|p| p * deg).collect(),
            qdot_max: vel.iter().map(|v| v * deg * velocity_scale).collect(),
        }
    }

    pub fn symmetric(n: usize, position: f64, velocity: f64) -> Self {
        Self {
            q_min: vec![-position; n],
            q_max: vec![position; n],
            qdot_max: vec![velocity; n],
        }
    }
}

/// On-disk chain description. Angles in radians, lengths in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDocument {
    pub joints: Vec<JointDocument>,
    pub tool_tip_offset: [f64; 3],
    pub tool_axis: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDocument {
    pub origin: [f64; 3],
    #[serde(default)]
    pub orientation_rpy: [f64; 3],
    pub axis: [f64; 3],
}

impl TryFrom<ChainDocument> for KinematicChain {
    type Error = Error;

    fn try_from(doc: ChainDocument) -> Result<Self> {
        let joints = doc
            .joints
            .iter()
            .map(|j| {
                let [r, p, y] = j.orientation_rpy;
                JointSpec::new(j.origin.into(), UnitQuaternion::from_euler_angles(r, p, y), j.axis.into())
            })
            .collect::<Result<Vec<_>>>()?;
        KinematicChain::new(joints, doc.tool_tip_offset.into(), doc.tool_axis.into())
    }
}

/// Homogeneous transform of a frame, used by diagnostics and tests.
pub fn frame_matrix(frame: &Frame) -> nalgebra::Matrix4<f64> {
    (Translation3::from(frame.position) * frame.rotation).to_homogeneous()
}

/// Largest entry of `RᵀR − I`.
pub fn orthonormality_error(rotation: &Matrix3<f64>) -> f64 {
    (rotation.transpose() * rotation - Matrix3::identity()).abs().max()
}

pub fn to_dvector(q: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(q)
}
