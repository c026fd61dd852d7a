//! JSON trial configuration.
//!
//! One document with the sections `chain`, `limits`, `trocar`, `endoscope`,
//! `noise`, `solver`, `weights`, `admittance` and `sim`. Every section and
//! field is optional; missing values fall back to the defaults below.

use std::path::{Path, PathBuf};

use nalgebra::{DVector, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::force::AdmittanceGains;
use crate::kinematics::{ChainDocument, JointLimits, KinematicChain};
use crate::sim::{perpendicular_basis, EndoscopeGeometry, NoiseModel, SimSettings, TrocarModel};
use crate::solver::SolverSettings;
use crate::task::{DEFAULT_EPSILON_C5, DEFAULT_WEIGHTS};

/// Joint speed fraction of the nominal arm used by the default limits.
pub const DEFAULT_VELOCITY_SCALE: f64 = 0.05;

/// Where the kinematic chain comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainSource {
    /// `"lbr_med7"` or `"planar_2link"`.
    Builtin(String),
    /// Path to a chain document, relative to the config file.
    File(PathBuf),
    Inline(ChainDocument),
}

impl Default for ChainSource {
    fn default() -> Self {
        ChainSource::Builtin("lbr_med7".into())
    }
}

impl ChainSource {
    pub fn load(&self, base_dir: Option<&Path>) -> Result<KinematicChain> {
        match self {
            ChainSource::Builtin(name) => match name.as_str() {
                "lbr_med7" => Ok(KinematicChain::lbr_med7()),
                "planar_2link" => Ok(KinematicChain::planar_2link()),
                other => Err(Error::Config(format!("unknown builtin chain {other:?}"))),
            },
            ChainSource::File(path) => {
                let path = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                KinematicChain::from_json_file(&path)
                    .map_err(|e| Error::Config(format!("chain file {}: {e}", path.display())))
            }
            ChainSource::Inline(doc) => doc.clone().try_into(),
        }
    }
}

/// Trocar placement relative to the initial endoscope pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Placement {
    /// Distance from the initial tip to the ring plane along the initial optical axis, m.
    pub approach_distance: f64,
    /// Sideways offset of the ring center from the initial optical axis, m.
    pub lateral_offset: f64,
    /// Tilt of the insertion axis away from the initial optical axis, rad.
    pub angular_offset: f64,
}

impl Default for Placement {
    fn default() -> Self {
        Self {
            approach_distance: 0.004,
            lateral_offset: 0.005,
            angular_offset: 10f64.to_radians(),
        }
    }
}

impl Placement {
    /// Ring center and axis for a scope starting at `tip` along `axis`.
    pub fn resolve(&self, tip: &Vector3<f64>, axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let (u, v) = perpendicular_basis(axis);
        let center = tip + axis * self.approach_distance + u * self.lateral_offset;
        let tilt = UnitQuaternion::from_axis_angle(&Unit::new_normalize(v), self.angular_offset);
        (center, (tilt * axis).normalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrocarSection {
    /// Absolute rest pose; when absent, `placement` is used.
    pub rest_center: Option<[f64; 3]>,
    pub rest_axis: Option<[f64; 3]>,
    pub placement: Placement,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub anchor_stiffness: f64,
    pub anchor_damping: f64,
    pub contact_stiffness: f64,
    pub effective_mass: f64,
}

impl Default for TrocarSection {
    fn default() -> Self {
        let m = TrocarModel::default();
        Self {
            rest_center: None,
            rest_axis: None,
            placement: Placement::default(),
            inner_radius: m.inner_radius,
            outer_radius: m.outer_radius,
            anchor_stiffness: m.anchor_stiffness,
            anchor_damping: m.anchor_damping,
            contact_stiffness: m.contact_stiffness,
            effective_mass: m.effective_mass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightsSection {
    pub w: [f64; 5],
    pub epsilon_c5: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        Self {
            w: DEFAULT_WEIGHTS,
            epsilon_c5: DEFAULT_EPSILON_C5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmittanceSection {
    #[serde(flatten)]
    pub gains: AdmittanceGains,
    /// Relative damping of the force estimator.
    pub estimator_damping: f64,
}

impl Default for AdmittanceSection {
    fn default() -> Self {
        Self {
            gains: AdmittanceGains::default(),
            estimator_damping: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSection {
    #[serde(flatten)]
    pub settings: SimSettings,
    /// Starting configuration; the builtin arm has a scope-down default.
    pub initial_q: Option<Vec<f64>>,
    /// Trial time limit, s.
    pub t_max: f64,
    /// How far past the docking depth the goal point sits, m.
    pub goal_overshoot: f64,
    pub ff_enabled: bool,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            settings: SimSettings::default(),
            initial_q: None,
            t_max: 30.0,
            goal_overshoot: 0.005,
            ff_enabled: true,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    pub chain: ChainSource,
    pub limits: Option<JointLimits>,
    pub trocar: TrocarSection,
    pub endoscope: EndoscopeGeometry,
    pub noise: NoiseModel,
    pub solver: SolverSettings,
    pub weights: WeightsSection,
    pub admittance: AdmittanceSection,
    pub sim: SimSection,
    /// Directory that relative chain paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl TrialConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_json_str(&text)?;
        config.base_dir = path.parent().map(Path::to_path_buf);
        Ok(config)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        self
    }

    pub fn with_ff(mut self, enabled: bool) -> Self {
        self.sim.ff_enabled = enabled;
        self
    }

    /// Resolves every section into runtime types, validating as it goes.
    pub fn resolve(&self) -> Result<ResolvedTrial> {
        let chain = self.chain.load(self.base_dir.as_deref())?;
        let n = chain.dof();
        let is_arm = matches!(&self.chain, ChainSource::Builtin(name) if name == "lbr_med7");

        let limits = match &self.limits {
            Some(l) => l.clone(),
            None if is_arm => JointLimits::lbr_med7(DEFAULT_VELOCITY_SCALE),
            None => JointLimits::symmetric(n, std::f64::consts::PI, 0.5),
        };
        limits.validate().map_err(config_err)?;
        check_len(n, limits.dof()).map_err(config_err)?;

        let q0 = match &self.sim.initial_q {
            Some(q) => q.clone(),
            None if is_arm => default_arm_pose().to_vec(),
            None => vec![0.0; n],
        };
        check_len(n, q0.len()).map_err(config_err)?;
        if let Some(i) = limits.violation(&q0) {
            return Err(Error::Config(format!("initial_q[{i}] outside joint limits")));
        }
        let q0 = DVector::from_vec(q0);

        let pose = chain.pose(q0.as_slice())?;
        let t = &self.trocar;
        let (center, axis) = match (t.rest_center, t.rest_axis) {
            (Some(c), Some(a)) => (Vector3::from(c), Vector3::from(a).normalize()),
            (None, None) => t.placement.resolve(&pose.tip(), &pose.optical_axis()),
            _ => return Err(Error::Config("trocar rest_center and rest_axis must be given together".into())),
        };
        let trocar = TrocarModel {
            rest_center: center,
            rest_axis: axis,
            inner_radius: t.inner_radius,
            outer_radius: t.outer_radius,
            anchor_stiffness: t.anchor_stiffness,
            anchor_damping: t.anchor_damping,
            contact_stiffness: t.contact_stiffness,
            effective_mass: t.effective_mass,
        };
        trocar.validate().map_err(config_err)?;
        self.endoscope.validate(&trocar).map_err(config_err)?;

        let noise = NoiseModel {
            seed: self.sim.seed,
            ..self.noise
        };
        noise.validate().map_err(config_err)?;
        self.solver.validate().map_err(config_err)?;
        self.admittance.gains.validate().map_err(config_err)?;
        if !(self.admittance.estimator_damping >= 0.0) {
            return Err(Error::Config("estimator_damping must be non-negative".into()));
        }
        if self.weights.w.iter().any(|w| !(*w > 0.0)) || !(self.weights.epsilon_c5 > 0.0) {
            return Err(Error::Config("weights and epsilon_c5 must be positive".into()));
        }
        self.sim.settings.validate().map_err(config_err)?;
        if !(self.sim.t_max > 0.0) || !(self.sim.goal_overshoot >= 0.0) {
            return Err(Error::Config("t_max must be positive and goal_overshoot non-negative".into()));
        }

        Ok(ResolvedTrial {
            chain,
            limits,
            q0,
            trocar,
            endoscope: self.endoscope,
            noise,
            solver: self.solver.clone(),
            weights: self.weights.w,
            epsilon_c5: self.weights.epsilon_c5,
            admittance: self.admittance.gains,
            estimator_damping: self.admittance.estimator_damping,
            sim: self.sim.settings,
            t_max: self.sim.t_max,
            goal_overshoot: self.sim.goal_overshoot,
            ff_enabled: self.sim.ff_enabled,
            seed: self.sim.seed,
        })
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Scope pointing straight down in front of the base.
pub fn default_arm_pose() -> [f64; 7] {
    let (shoulder, elbow) = (0.5, -1.4);
    [0.0, shoulder, 0.0, elbow, 0.0, std::f64::consts::PI - (shoulder - elbow), 0.0]
}

/// A validated trial, ready to run.
#[derive(Debug, Clone)]
pub struct ResolvedTrial {
    pub chain: KinematicChain,
    pub limits: JointLimits,
    pub q0: DVector<f64>,
    pub trocar: TrocarModel,
    pub endoscope: EndoscopeGeometry,
    pub noise: NoiseModel,
    pub solver: SolverSettings,
    pub weights: [f64; 5],
    pub epsilon_c5: f64,
    pub admittance: AdmittanceGains,
    pub estimator_damping: f64,
    pub sim: SimSettings,
    pub t_max: f64,
    pub goal_overshoot: f64,
    pub ff_enabled: bool,
    pub seed: u64,
}
