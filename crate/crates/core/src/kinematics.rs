//! 7-DOF serial arm forward kinematics, geometric Jacobians, and the
//! cooperative (absolute/relative) dual-arm task space.
//!
//! The cutting arm occupies joint indices 0..7 of the stacked state, the
//! collecting arm indices 7..14. The absolute task is the cutting tool
//! pose in the world (camera) frame; the relative task is the collecting
//! tool pose expressed in the cutting tool frame.

use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, SMatrix, Unit, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::{Capsule, Pose6};

pub const ARM_DOF: usize = 7;
pub const DUAL_DOF: usize = 14;

pub type TaskJacobian = SMatrix<f64, 6, DUAL_DOF>;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("joint vector contains non-finite values")]
    NonFinite,
}

/// One revolute joint: a fixed translation from the previous frame
/// followed by a rotation about `axis`.
#[derive(Debug, Clone)]
pub struct JointDescriptor {
    pub axis: Unit<Vector3<f64>>,
    pub offset: Vector3<f64>,
}

/// Collision capsule rigidly attached to the frame of joint `link`.
#[derive(Debug, Clone)]
pub struct LinkCapsule {
    pub link: usize,
    pub a: Point3<f64>,
    pub b: Point3<f64>,
    pub radius: f64,
    /// Excluded from arm-vs-arm pairs (tool capsules, which are meant to
    /// come close during harvesting).
    pub self_exempt: bool,
}

/// Kinematic description of one 7-DOF serial arm.
#[derive(Debug, Clone)]
pub struct ArmModel {
    pub base: Isometry3<f64>,
    pub joints: Vec<JointDescriptor>,
    pub tool: Isometry3<f64>,
    pub q_min: [f64; ARM_DOF],
    pub q_max: [f64; ARM_DOF],
    pub v_max: [f64; ARM_DOF],
    pub capsules: Vec<LinkCapsule>,
}

impl ArmModel {
    pub fn validate(&self) -> Result<(), String> {
        if self.joints.len() != ARM_DOF {
            return Err(format!("expected {} joints, got {}", ARM_DOF, self.joints.len()));
        }
        for i in 0..ARM_DOF {
            if self.q_min[i] >= self.q_max[i] {
                return Err(format!("joint {i}: q_min must be < q_max"));
            }
            if self.v_max[i] <= 0.0 {
                return Err(format!("joint {i}: v_max must be positive"));
            }
        }
        for (k, c) in self.capsules.iter().enumerate() {
            if c.link >= ARM_DOF {
                return Err(format!("capsule {k}: link index {} out of range", c.link));
            }
            if c.radius <= 0.0 {
                return Err(format!("capsule {k}: radius must be positive"));
            }
        }
        Ok(())
    }
}

/// Stacked joint state of both arms: cutting arm first, collecting arm second.
#[derive(Debug, Clone, Copy)]
pub struct DualArmState {
    pub q: [f64; DUAL_DOF],
}

impl DualArmState {
    pub fn new(q: [f64; DUAL_DOF]) -> Self {
        Self { q }
    }

    pub fn left(&self) -> [f64; ARM_DOF] {
        self.q[..ARM_DOF].try_into().unwrap()
    }

    pub fn right(&self) -> [f64; ARM_DOF] {
        self.q[ARM_DOF..].try_into().unwrap()
    }
}

/// The two arm models of the platform.
#[derive(Debug, Clone)]
pub struct DualArmModel {
    /// Cutting arm.
    pub left: ArmModel,
    /// Collecting arm.
    pub right: ArmModel,
}

/// Per-configuration forward kinematics products: one frame per joint
/// (offset and joint rotation applied) plus the tool frame.
#[derive(Debug, Clone)]
pub struct FkResult {
    pub joint_frames: Vec<Isometry3<f64>>,
    pub tool: Isometry3<f64>,
}

impl FkResult {
    pub fn joint_origin(&self, i: usize) -> Point3<f64> {
        Point3::from(self.joint_frames[i].translation.vector)
    }

    pub fn joint_axis(&self, model: &ArmModel, i: usize) -> Vector3<f64> {
        self.joint_frames[i].rotation * model.joints[i].axis.as_ref()
    }

    pub fn tool_position(&self) -> Point3<f64> {
        Point3::from(self.tool.translation.vector)
    }
}

/// Full forward kinematics of one arm, keeping every intermediate frame.
pub fn fk_frames(model: &ArmModel, q7: &[f64; ARM_DOF]) -> Result<FkResult, KinematicsError> {
    if !q7.iter().all(|v| v.is_finite()) {
        return Err(KinematicsError::NonFinite);
    }
    let mut t = model.base;
    let mut joint_frames = Vec::with_capacity(ARM_DOF);
    for (j, &qi) in model.joints.iter().zip(q7.iter()) {
        t *= Isometry3::from_parts(
            j.offset.into(),
            UnitQuaternion::from_axis_angle(&j.axis, qi),
        );
        joint_frames.push(t);
    }
    let tool = t * model.tool;
    Ok(FkResult { joint_frames, tool })
}

/// Tool pose in the world frame.
pub fn forward_kinematics(model: &ArmModel, q7: &[f64; ARM_DOF]) -> Result<Pose6, KinematicsError> {
    let fk = fk_frames(model, q7)?;
    Ok(Pose6::from_parts(
        fk.tool.translation.vector,
        &Rotation3::from(fk.tool.rotation),
    ))
}

/// Geometric Jacobian of the tool point, world frame, `[linear; angular]`.
///
/// Column `i` is `(z_i x (p_tool - p_i); z_i)` for revolute joint `i`.
pub fn geometric_jacobian(
    model: &ArmModel,
    q7: &[f64; ARM_DOF],
) -> Result<SMatrix<f64, 6, ARM_DOF>, KinematicsError> {
    let fk = fk_frames(model, q7)?;
    Ok(jacobian_from_fk(model, &fk, &fk.tool_position()))
}

/// Jacobian of an arbitrary world-frame point rigidly attached to
/// `attached_link` (linear rows only make sense for points off the tool,
/// but angular rows are included for uniformity).
pub fn point_jacobian_from_fk(
    model: &ArmModel,
    fk: &FkResult,
    point: &Point3<f64>,
    attached_link: usize,
) -> SMatrix<f64, 3, ARM_DOF> {
    let mut j = SMatrix::<f64, 3, ARM_DOF>::zeros();
    for i in 0..=attached_link {
        let z = fk.joint_axis(model, i);
        let col = z.cross(&(point - fk.joint_origin(i)));
        j.set_column(i, &col);
    }
    j
}

fn jacobian_from_fk(
    model: &ArmModel,
    fk: &FkResult,
    point: &Point3<f64>,
) -> SMatrix<f64, 6, ARM_DOF> {
    let mut j = SMatrix::<f64, 6, ARM_DOF>::zeros();
    for i in 0..ARM_DOF {
        let z = fk.joint_axis(model, i);
        let lin = z.cross(&(point - fk.joint_origin(i)));
        for r in 0..3 {
            j[(r, i)] = lin[r];
            j[(r + 3, i)] = z[r];
        }
    }
    j
}

/// World-frame capsules of one arm at the given configuration.
pub fn world_capsules(model: &ArmModel, fk: &FkResult) -> Vec<(usize, bool, Capsule)> {
    model
        .capsules
        .iter()
        .map(|c| {
            let t = &fk.joint_frames[c.link];
            (c.link, c.self_exempt, Capsule::new(t * c.a, t * c.b, c.radius))
        })
        .collect()
}

/// Absolute cooperative task: cutting tool pose in the world frame and
/// its 6x14 Jacobian (collecting-arm block identically zero).
pub fn absolute_task(
    models: &DualArmModel,
    state: &DualArmState,
) -> Result<(Pose6, TaskJacobian), KinematicsError> {
    let ql = state.left();
    let fk = fk_frames(&models.left, &ql)?;
    let pose = Pose6::from_parts(fk.tool.translation.vector, &Rotation3::from(fk.tool.rotation));
    let jl = jacobian_from_fk(&models.left, &fk, &fk.tool_position());
    let mut j = TaskJacobian::zeros();
    j.view_mut((0, 0), (6, ARM_DOF)).copy_from(&jl);
    Ok((pose, j))
}

/// Relative cooperative task: collecting tool pose expressed in the
/// cutting tool frame, and the 6x14 Jacobian of its twist in that frame.
///
/// With `d = p_right - p_left` and `R_l` the cutting tool rotation, the
/// relative twist is
/// `v = R_l^T (v_r - v_l - w_l x d)`, `w = R_l^T (w_r - w_l)`,
/// a plain frame change of twists.
pub fn relative_task(
    models: &DualArmModel,
    state: &DualArmState,
) -> Result<(Pose6, TaskJacobian), KinematicsError> {
    let fk_l = fk_frames(&models.left, &state.left())?;
    let fk_r = fk_frames(&models.right, &state.right())?;

    let rel = fk_l.tool.inverse() * fk_r.tool;
    let pose = Pose6::from_parts(rel.translation.vector, &Rotation3::from(rel.rotation));

    let jl = jacobian_from_fk(&models.left, &fk_l, &fk_l.tool_position());
    let jr = jacobian_from_fk(&models.right, &fk_r, &fk_r.tool_position());

    let rlt = Rotation3::from(fk_l.tool.rotation).matrix().transpose();
    let d = fk_r.tool_position() - fk_l.tool_position();
    let d_hat = skew(&d);

    let mut j = TaskJacobian::zeros();
    for i in 0..ARM_DOF {
        let jl_v = Vector3::new(jl[(0, i)], jl[(1, i)], jl[(2, i)]);
        let jl_w = Vector3::new(jl[(3, i)], jl[(4, i)], jl[(5, i)]);
        // left-arm motion seen from the left tool frame
        let lin = rlt * (-jl_v + d_hat * jl_w);
        let ang = rlt * (-jl_w);
        for r in 0..3 {
            j[(r, i)] = lin[r];
            j[(r + 3, i)] = ang[r];
        }
        let jr_v = Vector3::new(jr[(0, i)], jr[(1, i)], jr[(2, i)]);
        let jr_w = Vector3::new(jr[(3, i)], jr[(4, i)], jr[(5, i)]);
        let lin = rlt * jr_v;
        let ang = rlt * jr_w;
        for r in 0..3 {
            j[(r, i + ARM_DOF)] = lin[r];
            j[(r + 3, i + ARM_DOF)] = ang[r];
        }
    }
    Ok((pose, j))
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_error;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, Translation3, Vector6};

    /// Simple reference arm used across the kinematics tests: alternating
    /// z/x axes, extending along +z.
    pub fn test_arm(base_x: f64) -> ArmModel {
        let axis_z = Unit::new_normalize(Vector3::z());
        let axis_x = Unit::new_normalize(Vector3::x());
        let mk = |axis: Unit<Vector3<f64>>, off: [f64; 3]| JointDescriptor {
            axis,
            offset: Vector3::from(off),
        };
        ArmModel {
            base: Isometry3::from_parts(
                Translation3::new(base_x, 0.1, 0.0),
                UnitQuaternion::identity(),
            ),
            joints: vec![
                mk(axis_z, [0.0, 0.0, 0.08]),
                mk(axis_x, [0.0, 0.0, 0.0]),
                mk(axis_z, [0.0, 0.0, 0.32]),
                mk(axis_x, [0.0, 0.0, 0.0]),
                mk(axis_z, [0.0, 0.0, 0.32]),
                mk(axis_x, [0.0, 0.0, 0.0]),
                mk(axis_z, [0.0, 0.0, 0.08]),
            ],
            tool: Isometry3::from_parts(
                Translation3::new(0.0, 0.0, 0.10),
                UnitQuaternion::identity(),
            ),
            q_min: [-2.9, -2.0, -2.9, -2.0, -2.9, -2.0, -2.9],
            q_max: [2.9, 2.0, 2.9, 2.0, 2.9, 2.0, 2.9],
            v_max: [2.0; 7],
            capsules: vec![],
        }
    }

    fn models() -> DualArmModel {
        DualArmModel {
            left: test_arm(-0.28),
            right: test_arm(0.28),
        }
    }

    fn rand_q(seed: u64) -> [f64; ARM_DOF] {
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let mut q = [0.0; ARM_DOF];
        for v in q.iter_mut() {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            *v = ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 2.4;
        }
        q
    }

    #[test]
    fn fk_zero_config_composes_static_offsets() {
        let m = test_arm(-0.28);
        let pose = forward_kinematics(&m, &[0.0; ARM_DOF]).unwrap();
        // hand-composed: base + sum of joint offsets + tool
        assert_relative_eq!(pose.position.x, -0.28, epsilon = 1e-12);
        assert_relative_eq!(pose.position.y, 0.1, epsilon = 1e-12);
        assert_relative_eq!(pose.position.z, 0.08 + 0.32 + 0.32 + 0.08 + 0.10, epsilon = 1e-12);
        assert_relative_eq!(pose.rpy.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn wrist_roll_leaves_tool_position_invariant() {
        // tool offset lies on the last joint axis (z), so rotating that
        // joint must not move the tool point
        let m = test_arm(0.0);
        let mut q = rand_q(3);
        let p0 = forward_kinematics(&m, &q).unwrap().position;
        q[6] += 0.7;
        let p1 = forward_kinematics(&m, &q).unwrap().position;
        assert_relative_eq!((p0 - p1).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn fk_matches_matrix_chain_oracle() {
        // independent 4x4 homogeneous-matrix composition
        let m = test_arm(0.15);
        for seed in 0..20 {
            let q = rand_q(seed);
            let mut t = DMatrix::<f64>::identity(4, 4);
            let compose = |t: &DMatrix<f64>, off: &Vector3<f64>, r: &Matrix3<f64>| {
                let mut step = DMatrix::<f64>::identity(4, 4);
                for i in 0..3 {
                    for j in 0..3 {
                        step[(i, j)] = r[(i, j)];
                    }
                    step[(i, 3)] = off[i];
                }
                t * step
            };
            t = compose(&t, &m.base.translation.vector, Rotation3::from(m.base.rotation).matrix());
            for (j, &qi) in m.joints.iter().zip(q.iter()) {
                let r = Rotation3::from_axis_angle(&j.axis, qi);
                t = compose(&t, &j.offset, r.matrix());
            }
            t = compose(&t, &m.tool.translation.vector, Rotation3::from(m.tool.rotation).matrix());
            let pose = forward_kinematics(&m, &q).unwrap();
            for i in 0..3 {
                assert_relative_eq!(pose.position[i], t[(i, 3)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn rejects_non_finite_joints() {
        let m = test_arm(0.0);
        let mut q = [0.0; ARM_DOF];
        q[2] = f64::NAN;
        assert!(forward_kinematics(&m, &q).is_err());
    }

    /// Central finite differences of the tool pose wrt one joint.
    fn fd_column(m: &ArmModel, q: &[f64; ARM_DOF], i: usize, h: f64) -> Vector6<f64> {
        let mut qp = *q;
        let mut qm = *q;
        qp[i] += h;
        qm[i] -= h;
        let fp = fk_frames(m, &qp).unwrap();
        let fm = fk_frames(m, &qm).unwrap();
        let f0 = fk_frames(m, q).unwrap();
        let dp = (fp.tool_position() - fm.tool_position()) / (2.0 * h);
        // omega from the skew part of dR/dq * R^T; stays well conditioned
        // where angle-axis extraction of a near-identity rotation does not
        let dr = (Rotation3::from(fp.tool.rotation).matrix()
            - Rotation3::from(fm.tool.rotation).matrix())
            / (2.0 * h);
        let s = dr * Rotation3::from(f0.tool.rotation).matrix().transpose();
        let w = Vector3::new(
            (s[(2, 1)] - s[(1, 2)]) / 2.0,
            (s[(0, 2)] - s[(2, 0)]) / 2.0,
            (s[(1, 0)] - s[(0, 1)]) / 2.0,
        );
        Vector6::new(dp.x, dp.y, dp.z, w.x, w.y, w.z)
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = test_arm(-0.28);
        for seed in 0..100 {
            let q = rand_q(seed);
            let j = geometric_jacobian(&m, &q).unwrap();
            for i in 0..ARM_DOF {
                let fd = fd_column(&m, &q, i, 1e-6);
                for r in 0..6 {
                    assert!(
                        (j[(r, i)] - fd[r]).abs() <= 1e-5,
                        "seed {seed} col {i} row {r}: {} vs {}",
                        j[(r, i)],
                        fd[r]
                    );
                }
            }
        }
    }

    #[test]
    fn straight_arm_is_singular() {
        let m = test_arm(0.0);
        let j = geometric_jacobian(&m, &[0.0; ARM_DOF]).unwrap();
        let svd = nalgebra::SVD::new(DMatrix::from_fn(6, 7, |r, c| j[(r, c)]), false, false);
        let rank = svd.singular_values.iter().filter(|&&s| s > 1e-9).count();
        assert!(rank < 6, "straight configuration should lose rank, got {rank}");
    }

    #[test]
    fn zero_velocity_maps_to_zero_twist() {
        let m = test_arm(0.0);
        let j = geometric_jacobian(&m, &rand_q(9)).unwrap();
        let twist = j * SMatrix::<f64, 7, 1>::zeros();
        assert_relative_eq!(twist.norm(), 0.0);
    }

    #[test]
    fn absolute_task_right_block_zero_and_matches_fk() {
        let ms = models();
        let mut q = [0.0; DUAL_DOF];
        for (i, qi) in rand_q(11).iter().enumerate() {
            q[i] = *qi;
            q[i + ARM_DOF] = -*qi * 0.5;
        }
        let state = DualArmState::new(q);
        let (pose, j) = absolute_task(&ms, &state).unwrap();
        let fk = forward_kinematics(&ms.left, &state.left()).unwrap();
        assert_relative_eq!((pose.position - fk.position).norm(), 0.0, epsilon = 1e-12);
        for r in 0..6 {
            for c in ARM_DOF..DUAL_DOF {
                assert_eq!(j[(r, c)], 0.0);
            }
        }
        // pure right-arm motion produces zero absolute task velocity
        let mut qd = SMatrix::<f64, DUAL_DOF, 1>::zeros();
        for i in ARM_DOF..DUAL_DOF {
            qd[i] = 0.3 * (i as f64 - 9.0);
        }
        assert_relative_eq!((j * qd).norm(), 0.0);
    }

    #[test]
    fn relative_pose_identity_when_tools_coincide() {
        // same arm geometry placed at the same base: identical q gives
        // coincident tools
        let ms = DualArmModel {
            left: test_arm(0.0),
            right: test_arm(0.0),
        };
        let qh = rand_q(4);
        let mut q = [0.0; DUAL_DOF];
        q[..ARM_DOF].copy_from_slice(&qh);
        q[ARM_DOF..].copy_from_slice(&qh);
        let (pose, _) = relative_task(&ms, &DualArmState::new(q)).unwrap();
        assert_relative_eq!(pose.position.norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(pose.rpy.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn relative_jacobian_matches_finite_differences() {
        let ms = models();
        let h = 1e-6;
        for seed in 0..30 {
            let mut q = [0.0; DUAL_DOF];
            let ql = rand_q(seed * 2 + 1);
            let qr = rand_q(seed * 2 + 2);
            q[..ARM_DOF].copy_from_slice(&ql);
            q[ARM_DOF..].copy_from_slice(&qr);
            let state = DualArmState::new(q);
            let (_, j) = relative_task(&ms, &state).unwrap();
            for i in 0..DUAL_DOF {
                let mut qp = q;
                let mut qm = q;
                qp[i] += h;
                qm[i] -= h;
                let rel = |qq: [f64; DUAL_DOF]| {
                    let fl = fk_frames(&ms.left, &qq[..ARM_DOF].try_into().unwrap()).unwrap();
                    let fr = fk_frames(&ms.right, &qq[ARM_DOF..].try_into().unwrap()).unwrap();
                    fl.tool.inverse() * fr.tool
                };
                let tp = rel(qp);
                let tm = rel(qm);
                let t0 = rel(q);
                let dp = (tp.translation.vector - tm.translation.vector) / (2.0 * h);
                let dr = (Rotation3::from(tp.rotation).matrix()
                    - Rotation3::from(tm.rotation).matrix())
                    / (2.0 * h);
                let s = dr * Rotation3::from(t0.rotation).matrix().transpose();
                let w = Vector3::new(
                    (s[(2, 1)] - s[(1, 2)]) / 2.0,
                    (s[(0, 2)] - s[(2, 0)]) / 2.0,
                    (s[(1, 0)] - s[(0, 1)]) / 2.0,
                );
                for r in 0..3 {
                    assert!(
                        (j[(r, i)] - dp[r]).abs() <= 1e-5,
                        "lin seed {seed} col {i} row {r}: {} vs {}",
                        j[(r, i)],
                        dp[r]
                    );
                    assert!(
                        (j[(r + 3, i)] - w[r]).abs() <= 1e-5,
                        "ang seed {seed} col {i} row {r}: {} vs {}",
                        j[(r + 3, i)],
                        w[r]
                    );
                }
            }
        }
    }

    #[test]
    fn frozen_left_arm_relative_twist_is_rotated_right_twist() {
        let ms = models();
        let mut q = [0.0; DUAL_DOF];
        q[..ARM_DOF].copy_from_slice(&rand_q(7));
        q[ARM_DOF..].copy_from_slice(&rand_q(8));
        let state = DualArmState::new(q);
        let (_, jr_task) = relative_task(&ms, &state).unwrap();

        let fk_l = fk_frames(&ms.left, &state.left()).unwrap();
        let jr_arm = geometric_jacobian(&ms.right, &state.right()).unwrap();
        let rlt = Rotation3::from(fk_l.tool.rotation).matrix().transpose();

        let mut qd_r = SMatrix::<f64, ARM_DOF, 1>::zeros();
        for i in 0..ARM_DOF {
            qd_r[i] = 0.1 * (i as f64 + 1.0);
        }
        let twist_r = jr_arm * qd_r;
        let mut qd = SMatrix::<f64, DUAL_DOF, 1>::zeros();
        for i in 0..ARM_DOF {
            qd[i + ARM_DOF] = qd_r[i];
        }
        let twist_rel = jr_task * qd;
        let lin = rlt * Vector3::new(twist_r[0], twist_r[1], twist_r[2]);
        let ang = rlt * Vector3::new(twist_r[3], twist_r[4], twist_r[5]);
        for r in 0..3 {
            assert_relative_eq!(twist_rel[r], lin[r], epsilon = 1e-12);
            assert_relative_eq!(twist_rel[r + 3], ang[r], epsilon = 1e-12);
        }
    }

    #[test]
    fn masked_absolute_error_has_five_active_rows() {
        let ms = models();
        let state = DualArmState::new([0.2; DUAL_DOF]);
        let (pose, _) = absolute_task(&ms, &state).unwrap();
        let mut desired = Pose6::new(Vector3::new(0.0, -0.1, 0.55), Vector3::new(0.0, 0.0, 3.1));
        desired.mask[4] = false;
        let e = pose_error(&pose, &desired);
        assert_eq!(e[4], 0.0);
        assert_eq!(desired.mask.iter().filter(|&&m| m).count(), 5);
    }
}
