//! Scenario files: versioned TOML documents describing the camera, both
//! arms, the synthetic scene, and every parameter override for one
//! simulation run. Unknown keys are rejected, and semantic errors carry
//! the field path of the offending value.

use std::path::Path;

use nalgebra::{Isometry3, Point3, Rotation3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControllerParams;
use crate::hqp::DamperParams;
use crate::kinematics::{ArmModel, DualArmModel, JointDescriptor, LinkCapsule, ARM_DOF};
use crate::perception::render::SyntheticScene;
use crate::perception::track::TrackerParams;
use crate::perception::{CameraIntrinsics, HsvRange};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn default_dt() -> f64 {
    0.01
}
fn default_max_time() -> f64 {
    120.0
}
fn default_perception_hz() -> f64 {
    15.0
}

/// Timing and seeding of one run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_max_time")]
    pub max_time: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_perception_hz")]
    pub perception_hz: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            max_time: default_max_time(),
            seed: 0,
            perception_hz: default_perception_hz(),
        }
    }
}

fn default_depth_max() -> f64 {
    2.0
}
fn default_min_trunk_pixels() -> usize {
    200
}
fn default_jump_threshold() -> f64 {
    0.10
}
fn default_expiry_frames() -> u64 {
    100
}

/// Localization and registry tuning.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptionSection {
    #[serde(default = "default_depth_max")]
    pub depth_max: f64,
    #[serde(default = "default_min_trunk_pixels")]
    pub min_trunk_pixels: usize,
    #[serde(default = "default_jump_threshold")]
    pub jump_threshold: f64,
    #[serde(default = "default_expiry_frames")]
    pub expiry_frames: u64,
    #[serde(default)]
    pub hsv: HsvRange,
}

impl Default for PerceptionSection {
    fn default() -> Self {
        Self {
            depth_max: default_depth_max(),
            min_trunk_pixels: default_min_trunk_pixels(),
            jump_threshold: default_jump_threshold(),
            expiry_frames: default_expiry_frames(),
            hsv: HsvRange::default(),
        }
    }
}

fn default_lambda() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HqpSection {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

impl Default for HqpSection {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub axis: [f64; 3],
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsuleSpec {
    pub link: usize,
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
    #[serde(default)]
    pub self_exempt: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub base_xyz: [f64; 3],
    #[serde(default)]
    pub base_rpy: [f64; 3],
    pub joints: Vec<JointSpec>,
    pub tool_xyz: [f64; 3],
    #[serde(default)]
    pub tool_rpy: [f64; 3],
    pub q_min: [f64; ARM_DOF],
    pub q_max: [f64; ARM_DOF],
    pub v_max: [f64; ARM_DOF],
    pub q0: [f64; ARM_DOF],
    #[serde(default)]
    pub capsules: Vec<CapsuleSpec>,
}

fn isometry(xyz: &[f64; 3], rpy: &[f64; 3]) -> Isometry3<f64> {
    Isometry3::from_parts(
        Translation3::new(xyz[0], xyz[1], xyz[2]),
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2])),
    )
}

impl ArmSpec {
    pub fn build(&self) -> ArmModel {
        ArmModel {
            base: isometry(&self.base_xyz, &self.base_rpy),
            joints: self
                .joints
                .iter()
                .map(|j| JointDescriptor {
                    axis: Unit::new_normalize(Vector3::from(j.axis)),
                    offset: Vector3::from(j.offset),
                })
                .collect(),
            tool: isometry(&self.tool_xyz, &self.tool_rpy),
            q_min: self.q_min,
            q_max: self.q_max,
            v_max: self.v_max,
            capsules: self
                .capsules
                .iter()
                .map(|c| LinkCapsule {
                    link: c.link,
                    a: Point3::from(c.a),
                    b: Point3::from(c.b),
                    radius: c.radius,
                    self_exempt: c.self_exempt,
                })
                .collect(),
        }
    }

    fn validate(&self, path: &str) -> Result<(), ScenarioError> {
        for (i, j) in self.joints.iter().enumerate() {
            if Vector3::from(j.axis).norm() < 1e-9 {
                return Err(ScenarioError::Invalid(format!(
                    "{path}.joints[{i}].axis: zero vector"
                )));
            }
        }
        self.build()
            .validate()
            .map_err(|e| ScenarioError::Invalid(format!("{path}: {e}")))?;
        for i in 0..ARM_DOF {
            if self.q0[i] < self.q_min[i] || self.q0[i] > self.q_max[i] {
                return Err(ScenarioError::Invalid(format!(
                    "{path}.q0[{i}]: {} outside [{}, {}]",
                    self.q0[i], self.q_min[i], self.q_max[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmsSection {
    pub left: ArmSpec,
    pub right: ArmSpec,
}

/// Full scenario document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    #[serde(default)]
    pub sim: SimSection,
    pub camera: CameraIntrinsics,
    pub scene: SyntheticScene,
    #[serde(default)]
    pub perception: PerceptionSection,
    #[serde(default)]
    pub tracker: TrackerParams,
    #[serde(default)]
    pub controller: ControllerParams,
    #[serde(default)]
    pub damper: DamperParams,
    #[serde(default)]
    pub hqp: HqpSection,
    pub arms: ArmsSection,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |path: &str, msg: &str| Err(ScenarioError::Invalid(format!("{path}: {msg}")));
        if self.version != SCENARIO_VERSION {
            return bad("version", &format!("unsupported (expected {SCENARIO_VERSION})"));
        }
        if !(self.sim.dt > 0.0) {
            return bad("sim.dt", "must be positive");
        }
        if !(self.sim.max_time > 0.0) {
            return bad("sim.max_time", "must be positive");
        }
        if !(self.sim.perception_hz > 0.0) {
            return bad("sim.perception_hz", "must be positive");
        }
        self.camera
            .validate()
            .map_err(|e| ScenarioError::Invalid(format!("camera: {e}")))?;
        self.scene
            .validate()
            .map_err(|e| ScenarioError::Invalid(format!("scene.{e}")))?;
        if !(self.perception.depth_max > 0.0) {
            return bad("perception.depth_max", "must be positive");
        }
        self.controller
            .validate()
            .map_err(|e| ScenarioError::Invalid(format!("controller: {e}")))?;
        self.damper
            .validate()
            .map_err(|e| ScenarioError::Invalid(format!("damper: {e}")))?;
        if !(self.hqp.lambda > 0.0) {
            return bad("hqp.lambda", "must be positive");
        }
        self.arms.left.validate("arms.left")?;
        self.arms.right.validate("arms.right")?;
        Ok(())
    }

    pub fn models(&self) -> DualArmModel {
        DualArmModel {
            left: self.arms.left.build(),
            right: self.arms.right.build(),
        }
    }

    pub fn q0(&self) -> [f64; 2 * ARM_DOF] {
        let mut q = [0.0; 2 * ARM_DOF];
        q[..ARM_DOF].copy_from_slice(&self.arms.left.q0);
        q[ARM_DOF..].copy_from_slice(&self.arms.right.q0);
        q
    }
}
