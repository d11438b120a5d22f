//! Harvest-cycle state machine.
//!
//! Selects fruits, generates the per-phase absolute/relative pose
//! objectives, maintains the obstacle set (trunk cylinder with
//! target-dependent radius, fruit ellipsoids, arm-vs-arm capsules),
//! commands the hierarchical QP solver, and decides success, skip and
//! termination.

use std::collections::BTreeSet;

use nalgebra::{RowDVector, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    closest_point_on_segment, closest_points_segments, pose_error, Cylinder, Ellipsoid, Pose6,
};
use crate::hqp::{
    collision_rows, joint_limit_rows, CollisionPair, ConstraintSet, DamperParams, HierarchyOutcome,
    HqpSolver, Priority, QpTask, RowSource,
};
use crate::kinematics::{
    absolute_task, fk_frames, point_jacobian_from_fk, relative_task, world_capsules, DualArmModel,
    DualArmState, FkResult, TaskJacobian, ARM_DOF, DUAL_DOF,
};
use crate::perception::{FruitEstimate, TreeEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HarvestPhase {
    SelectFruit,
    Approach,
    Harvest,
    CutAndCollect,
    Leave,
    Done,
}

impl std::fmt::Display for HarvestPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            HarvestPhase::SelectFruit => "select",
            HarvestPhase::Approach => "approach",
            HarvestPhase::Harvest => "harvest",
            HarvestPhase::CutAndCollect => "cut_and_collect",
            HarvestPhase::Leave => "leave",
            HarvestPhase::Done => "done",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerParams {
    /// Security distance kept between the cutting point and the fruit
    /// surface while cutting (m).
    pub d_s_cut: f64,
    /// Approach/leave standoff along the camera z axis (m).
    pub d_z: f64,
    /// Proportional gain on position error (1/s).
    pub k_p_pos: f64,
    /// Proportional gain on orientation error (1/s).
    pub k_p_ori: f64,
    /// Task-space linear velocity clamp (m/s).
    pub v_max_lin: f64,
    /// Task-space angular velocity clamp (rad/s).
    pub v_max_ang: f64,
    /// Position tolerance for phase advancement (m).
    pub tol_pos: f64,
    /// Orientation tolerance for phase advancement (rad).
    pub tol_ori: f64,
    /// Per-phase timeout before the target is declared unreachable (s).
    pub phase_timeout: f64,
    /// Hold time simulating the cut/catch action (s).
    pub cut_dwell: f64,
    /// How long SelectFruit waits for tracker confirmations before the
    /// run is declared Done (s).
    pub select_patience: f64,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            d_s_cut: 0.02,
            d_z: 0.15,
            k_p_pos: 2.0,
            k_p_ori: 1.0,
            v_max_lin: 0.25,
            v_max_ang: 0.5,
            tol_pos: 0.005,
            tol_ori: 0.05,
            phase_timeout: 20.0,
            cut_dwell: 1.0,
            select_patience: 2.0,
        }
    }
}

impl ControllerParams {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("d_s_cut", self.d_s_cut),
            ("d_z", self.d_z),
            ("k_p_pos", self.k_p_pos),
            ("k_p_ori", self.k_p_ori),
            ("v_max_lin", self.v_max_lin),
            ("v_max_ang", self.v_max_ang),
            ("tol_pos", self.tol_pos),
            ("tol_ori", self.tol_ori),
            ("phase_timeout", self.phase_timeout),
            ("cut_dwell", self.cut_dwell),
            ("select_patience", self.select_patience),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.tol_pos >= self.d_s_cut || self.tol_pos >= self.d_z {
            return Err("tol_pos must be below both standoffs (d_s_cut, d_z)".into());
        }
        Ok(())
    }
}

/// Latest perception products consumed by the controller.
#[derive(Debug, Clone, Default)]
pub struct PerceptionSnapshot {
    pub fruits: Vec<FruitEstimate>,
    pub tree: Option<TreeEstimate>,
}

/// Current obstacle world: trunk cylinder (axis along camera y, radius
/// covering the fruit-to-trunk gap of the current target) and all
/// non-exempt fruit ellipsoids.
#[derive(Debug, Clone, Default)]
pub struct ObstacleSet {
    pub trunk: Option<Cylinder>,
    pub fruits: Vec<(u64, Ellipsoid)>,
}

/// `r_obs = dist[P_f, P_t] - d_h`; non-positive means the fruit sits at
/// or behind the obstacle surface and cannot be approached.
pub fn r_obs(target: &FruitEstimate, tree: &TreeEstimate) -> f64 {
    (target.center - tree.center).norm() - target.d_h
}

/// Structured controller event, timestamped with sim time.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    PhaseTransition {
        t: f64,
        from: HarvestPhase,
        to: HarvestPhase,
    },
    TargetSelected {
        t: f64,
        id: u64,
        x: f64,
        y: f64,
        z: f64,
        r_obs: f64,
    },
    TargetUnreachable {
        t: f64,
        id: u64,
        reason: String,
    },
    Blacklisted {
        t: f64,
        id: u64,
    },
    Harvested {
        t: f64,
        id: u64,
        abs_pos_err: f64,
        rel_pos_err: f64,
    },
    /// Level 2 of the hierarchy was infeasible; level-1 command used.
    SolverFallback {
        t: f64,
    },
    /// Level 1 failed; zero command issued.
    SolverAbort {
        t: f64,
        detail: String,
    },
}

/// Per-step measurements recorded by the simulator.
#[derive(Debug, Clone, Copy)]
pub struct StepDiagnostics {
    pub phase: HarvestPhase,
    pub abs_pos_err: f64,
    pub abs_ori_err: f64,
    pub rel_pos_err: f64,
    pub rel_ori_err: f64,
    pub min_dist_trunk: f64,
    pub min_dist_fruit: f64,
    pub min_dist_self: f64,
    pub constraint_rows: usize,
    /// `max(A qd - b)` at the commanded velocity; at most ~1e-9 when the
    /// QP behaves.
    pub constraint_violation: f64,
    pub solver_aborted: bool,
}

impl Default for StepDiagnostics {
    fn default() -> Self {
        Self {
            phase: HarvestPhase::SelectFruit,
            abs_pos_err: 0.0,
            abs_ori_err: 0.0,
            rel_pos_err: 0.0,
            rel_ori_err: 0.0,
            min_dist_trunk: f64::INFINITY,
            min_dist_fruit: f64::INFINITY,
            min_dist_self: f64::INFINITY,
            constraint_rows: 0,
            constraint_violation: f64::NEG_INFINITY,
            solver_aborted: false,
        }
    }
}

pub struct StepOutput {
    pub qdot: [f64; DUAL_DOF],
    pub events: Vec<Event>,
    pub diag: StepDiagnostics,
}

/// Per-phase desired cooperative poses.
///
/// Absolute (cutting tool, world frame): position
/// `(x_f, y_f - d_v - d_s_cut, z)` with `z = z_f` while harvesting and
/// `z = z_f - d_z` during approach and leave; orientation `(0, *, pi)`
/// with pitch unconstrained. Relative (collecting tool in the cutting
/// tool frame): `(0, -d_v - d_s_cut, 0, 0, pi/2, pi)` in every phase.
pub fn desired_poses(
    phase: HarvestPhase,
    target: &FruitEstimate,
    params: &ControllerParams,
) -> (Pose6, Pose6) {
    let standoff = match phase {
        HarvestPhase::Harvest | HarvestPhase::CutAndCollect => 0.0,
        _ => params.d_z,
    };
    let pos_a = Vector3::new(
        target.center.x,
        target.center.y - target.d_v - params.d_s_cut,
        target.center.z - standoff,
    );
    let x_a = Pose6::with_mask(
        pos_a,
        Vector3::new(0.0, 0.0, std::f64::consts::PI),
        [true, true, true, true, false, true],
    );
    let x_r = Pose6::new(
        Vector3::new(0.0, -(target.d_v + params.d_s_cut), 0.0),
        Vector3::new(0.0, std::f64::consts::FRAC_PI_2, std::f64::consts::PI),
    );
    (x_a, x_r)
}

fn clamp_norm(v: Vector3<f64>, max: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

/// Build a QP task from a 6x14 Jacobian and a desired twist, dropping
/// the rows masked out in the desired pose.
fn masked_task(
    j: &TaskJacobian,
    xdot: &Vector6<f64>,
    mask: &[bool; 6],
    priority: Priority,
) -> QpTask {
    let rows: Vec<usize> = (0..6).filter(|&r| mask[r]).collect();
    let mut jm = nalgebra::DMatrix::zeros(rows.len(), DUAL_DOF);
    let mut xm = nalgebra::DVector::zeros(rows.len());
    for (k, &r) in rows.iter().enumerate() {
        for c in 0..DUAL_DOF {
            jm[(k, c)] = j[(r, c)];
        }
        xm[k] = xdot[r];
    }
    QpTask::new(jm, xm, priority)
}

/// Distance-rate row for a witness point on one arm: the gradient of the
/// pair distance along `n` maps through the point Jacobian.
fn point_rate_row(
    n: &Vector3<f64>,
    jp: &SMatrix<f64, 3, ARM_DOF>,
    col_offset: usize,
) -> RowDVector<f64> {
    let mut row = RowDVector::zeros(DUAL_DOF);
    for i in 0..ARM_DOF {
        row[col_offset + i] = n.x * jp[(0, i)] + n.y * jp[(1, i)] + n.z * jp[(2, i)];
    }
    row
}

pub struct HarvestController {
    pub params: ControllerParams,
    pub damper: DamperParams,
    pub solver: HqpSolver,
    phase: HarvestPhase,
    phase_start: f64,
    dwell_start: f64,
    target: Option<FruitEstimate>,
    tree: Option<TreeEstimate>,
    harvested: BTreeSet<u64>,
    blacklist: BTreeSet<u64>,
}

impl HarvestController {
    pub fn new(params: ControllerParams, damper: DamperParams, solver: HqpSolver) -> Self {
        Self {
            params,
            damper,
            solver,
            phase: HarvestPhase::SelectFruit,
            phase_start: 0.0,
            dwell_start: 0.0,
            target: None,
            tree: None,
            harvested: BTreeSet::new(),
            blacklist: BTreeSet::new(),
        }
    }

    pub fn phase(&self) -> HarvestPhase {
        self.phase
    }

    pub fn harvested_ids(&self) -> &BTreeSet<u64> {
        &self.harvested
    }

    pub fn blacklisted_ids(&self) -> &BTreeSet<u64> {
        &self.blacklist
    }

    pub fn target(&self) -> Option<&FruitEstimate> {
        self.target.as_ref()
    }

    fn transition(&mut self, t: f64, to: HarvestPhase, events: &mut Vec<Event>) {
        events.push(Event::PhaseTransition {
            t,
            from: self.phase,
            to,
        });
        self.phase = to;
        self.phase_start = t;
    }

    /// Obstacles for this step: trunk cylinder with the current target's
    /// `r_obs` and every tracked, unharvested fruit, except the target
    /// while the tools must work inside its vicinity.
    fn obstacles(&self, snapshot: &PerceptionSnapshot) -> ObstacleSet {
        let exempt_target = matches!(
            self.phase,
            HarvestPhase::Harvest | HarvestPhase::CutAndCollect
        );
        let target_id = self.target.as_ref().map(|f| f.id);
        let fruits = snapshot
            .fruits
            .iter()
            .filter(|f| !self.harvested.contains(&f.id))
            .filter(|f| !(exempt_target && Some(f.id) == target_id))
            .map(|f| (f.id, Ellipsoid::new(f.center, f.d_h, f.d_v)))
            .collect();
        let trunk = self.tree.as_ref().map(|tree| {
            let radius = self
                .target
                .as_ref()
                .map(|f| r_obs(f, tree))
                .filter(|r| *r > 0.0)
                // no target: a small floor keeps the trunk itself covered
                .unwrap_or(0.05);
            Cylinder::new(tree.center, Vector3::y(), radius)
        });
        ObstacleSet { trunk, fruits }
    }

    /// Assemble every damper pair (trunk, fruits, arm-vs-arm) and the
    /// per-class minimum distances for logging.
    fn collision_pairs(
        &self,
        models: &DualArmModel,
        fks: &[&FkResult; 2],
        obstacles: &ObstacleSet,
        diag: &mut StepDiagnostics,
    ) -> Vec<CollisionPair> {
        let mut pairs = Vec::new();
        let arm_models = [&models.left, &models.right];
        let caps_l = world_capsules(&models.left, fks[0]);
        let caps_r = world_capsules(&models.right, fks[1]);
        let arm_caps = [&caps_l, &caps_r];

        for side in 0..2 {
            let offset = side * ARM_DOF;
            for (link, _, cap) in arm_caps[side] {
                if let Some(cyl) = &obstacles.trunk {
                    if let Some((p, n, d_axis)) = crate::geometry::segment_cylinder_witness(&cap.a, &cap.b, cyl) {
                        let d = d_axis - cap.radius;
                        diag.min_dist_trunk = diag.min_dist_trunk.min(d);
                        let jp = point_jacobian_from_fk(arm_models[side], fks[side], &p, *link);
                        pairs.push(CollisionPair {
                            distance: d,
                            ddot_row: point_rate_row(n.as_ref(), &jp, offset),
                            source: RowSource::Trunk,
                        });
                    }
                }
                for (_, e) in &obstacles.fruits {
                    let p = closest_point_on_segment(&e.center, &cap.a, &cap.b);
                    let to_p = p - e.center;
                    let dist_c = to_p.norm();
                    if dist_c <= 1e-9 {
                        continue;
                    }
                    let d = dist_c - e.bounding_radius() - cap.radius;
                    diag.min_dist_fruit = diag.min_dist_fruit.min(d);
                    let n = to_p / dist_c;
                    let jp = point_jacobian_from_fk(arm_models[side], fks[side], &p, *link);
                    pairs.push(CollisionPair {
                        distance: d,
                        ddot_row: point_rate_row(&n, &jp, offset),
                        source: RowSource::Fruit,
                    });
                }
            }
        }

        for (link_l, exempt_l, cap_l) in &caps_l {
            for (link_r, exempt_r, cap_r) in &caps_r {
                if *exempt_l && *exempt_r {
                    // tool capsules are meant to meet during harvesting
                    continue;
                }
                let (pl, pr) = closest_points_segments(&cap_l.a, &cap_l.b, &cap_r.a, &cap_r.b);
                let sep = pl - pr;
                let dist_c = sep.norm();
                if dist_c <= 1e-9 {
                    continue;
                }
                let d = dist_c - cap_l.radius - cap_r.radius;
                diag.min_dist_self = diag.min_dist_self.min(d);
                let n = sep / dist_c;
                let jl = point_jacobian_from_fk(&models.left, fks[0], &pl, *link_l);
                let jr = point_jacobian_from_fk(&models.right, fks[1], &pr, *link_r);
                let row = point_rate_row(&n, &jl, 0) - point_rate_row(&n, &jr, ARM_DOF);
                pairs.push(CollisionPair {
                    distance: d,
                    ddot_row: row,
                    source: RowSource::SelfCollision,
                });
            }
        }
        pairs
    }

    fn constraints(
        &self,
        models: &DualArmModel,
        state: &DualArmState,
        fks: &[&FkResult; 2],
        obstacles: &ObstacleSet,
        dt: f64,
        diag: &mut StepDiagnostics,
    ) -> ConstraintSet {
        let mut q_min = [0.0; DUAL_DOF];
        let mut q_max = [0.0; DUAL_DOF];
        let mut v_max = [0.0; DUAL_DOF];
        for i in 0..ARM_DOF {
            q_min[i] = models.left.q_min[i];
            q_max[i] = models.left.q_max[i];
            v_max[i] = models.left.v_max[i];
            q_min[i + ARM_DOF] = models.right.q_min[i];
            q_max[i + ARM_DOF] = models.right.q_max[i];
            v_max[i + ARM_DOF] = models.right.v_max[i];
        }
        let mut set = joint_limit_rows(&state.q, &q_min, &q_max, &v_max, dt);
        let pairs = self.collision_pairs(models, fks, obstacles, diag);
        set.extend(collision_rows(&pairs, &self.damper));
        diag.constraint_rows = set.len();
        set
    }

    /// One control step at sim time `t`. Never panics on solver trouble:
    /// infeasibility degrades to a zero command plus an event.
    pub fn step(
        &mut self,
        t: f64,
        dt: f64,
        models: &DualArmModel,
        state: &DualArmState,
        snapshot: &PerceptionSnapshot,
    ) -> StepOutput {
        let mut events = Vec::new();
        let mut diag = StepDiagnostics {
            phase: self.phase,
            ..StepDiagnostics::default()
        };
        if snapshot.tree.is_some() {
            self.tree = snapshot.tree;
        }
        // follow the target's live estimate while it stays tracked
        if let Some(target) = &mut self.target {
            if let Some(fresh) = snapshot.fruits.iter().find(|f| f.id == target.id) {
                *target = *fresh;
            }
        }

        match self.phase {
            HarvestPhase::Done => StepOutput {
                qdot: [0.0; DUAL_DOF],
                events,
                diag,
            },
            HarvestPhase::SelectFruit => {
                self.select_step(t, snapshot, &mut events);
                diag.phase = self.phase;
                StepOutput {
                    qdot: [0.0; DUAL_DOF],
                    events,
                    diag,
                }
            }
            HarvestPhase::CutAndCollect => {
                // hold zero task velocity for the dwell, then declare the
                // fruit harvested
                if let Some(target) = self.target {
                    if let Ok(errs) = self.task_errors(models, state) {
                        diag.abs_pos_err = errs.0;
                        diag.abs_ori_err = errs.1;
                        diag.rel_pos_err = errs.2;
                        diag.rel_ori_err = errs.3;
                        if t - self.dwell_start >= self.params.cut_dwell {
                            self.harvested.insert(target.id);
                            events.push(Event::Harvested {
                                t,
                                id: target.id,
                                abs_pos_err: errs.0,
                                rel_pos_err: errs.2,
                            });
                            self.transition(t, HarvestPhase::Leave, &mut events);
                        }
                    }
                }
                let obstacles = self.obstacles(snapshot);
                if let Ok(fks) = self.fk_pair(models, state) {
                    self.collision_pairs(models, &[&fks.0, &fks.1], &obstacles, &mut diag);
                }
                StepOutput {
                    qdot: [0.0; DUAL_DOF],
                    events,
                    diag,
                }
            }
            HarvestPhase::Approach | HarvestPhase::Harvest | HarvestPhase::Leave => {
                self.motion_step(t, dt, models, state, snapshot, &mut events, &mut diag)
            }
        }
    }

    fn fk_pair(
        &self,
        models: &DualArmModel,
        state: &DualArmState,
    ) -> Result<(FkResult, FkResult), crate::kinematics::KinematicsError> {
        Ok((
            fk_frames(&models.left, &state.left())?,
            fk_frames(&models.right, &state.right())?,
        ))
    }

    /// (abs_pos, abs_ori, rel_pos, rel_ori) error norms against the
    /// current phase's desired poses.
    fn task_errors(
        &self,
        models: &DualArmModel,
        state: &DualArmState,
    ) -> Result<(f64, f64, f64, f64), crate::kinematics::KinematicsError> {
        let target = self.target.expect("task_errors without a target");
        let (x_a_des, x_r_des) = desired_poses(self.phase, &target, &self.params);
        let (x_a, _) = absolute_task(models, state)?;
        let (x_r, _) = relative_task(models, state)?;
        let e_a = pose_error(&x_a, &x_a_des);
        let e_r = pose_error(&x_r, &x_r_des);
        Ok((
            e_a.fixed_rows::<3>(0).norm(),
            e_a.fixed_rows::<3>(3).norm(),
            e_r.fixed_rows::<3>(0).norm(),
            e_r.fixed_rows::<3>(3).norm(),
        ))
    }

    fn select_step(&mut self, t: f64, snapshot: &PerceptionSnapshot, events: &mut Vec<Event>) {
        // candidates must be tracked, untried, and in front of the trunk
        loop {
            let candidate = snapshot
                .fruits
                .iter()
                .filter(|f| {
                    !self.harvested.contains(&f.id) && !self.blacklist.contains(&f.id)
                })
                .copied()
                .min_by(|a, b| a.cam_distance.total_cmp(&b.cam_distance));
            let Some(fruit) = candidate else {
                if t - self.phase_start >= self.params.select_patience {
                    self.target = None;
                    self.transition(t, HarvestPhase::Done, events);
                }
                return;
            };
            let reach = self.tree.as_ref().map(|tree| r_obs(&fruit, tree));
            if let Some(r) = reach {
                if r <= 0.0 {
                    events.push(Event::TargetUnreachable {
                        t,
                        id: fruit.id,
                        reason: format!("r_obs = {r:.4} <= 0"),
                    });
                    events.push(Event::Blacklisted { t, id: fruit.id });
                    self.blacklist.insert(fruit.id);
                    continue;
                }
            }
            events.push(Event::TargetSelected {
                t,
                id: fruit.id,
                x: fruit.center.x,
                y: fruit.center.y,
                z: fruit.center.z,
                r_obs: reach.unwrap_or(f64::NAN),
            });
            self.target = Some(fruit);
            self.transition(t, HarvestPhase::Approach, events);
            return;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn motion_step(
        &mut self,
        t: f64,
        dt: f64,
        models: &DualArmModel,
        state: &DualArmState,
        snapshot: &PerceptionSnapshot,
        events: &mut Vec<Event>,
        diag: &mut StepDiagnostics,
    ) -> StepOutput {
        let Some(target) = self.target else {
            // target lost (should not happen); restart selection
            self.transition(t, HarvestPhase::SelectFruit, events);
            return StepOutput {
                qdot: [0.0; DUAL_DOF],
                events: std::mem::take(events),
                diag: *diag,
            };
        };

        // reachability can degrade as estimates refine
        if self.phase != HarvestPhase::Leave {
            if let Some(tree) = &self.tree {
                let r = r_obs(&target, tree);
                if r <= 0.0 {
                    events.push(Event::TargetUnreachable {
                        t,
                        id: target.id,
                        reason: format!("r_obs = {r:.4} <= 0"),
                    });
                    events.push(Event::Blacklisted { t, id: target.id });
                    self.blacklist.insert(target.id);
                    self.transition(t, HarvestPhase::Leave, events);
                    return StepOutput {
                        qdot: [0.0; DUAL_DOF],
                        events: std::mem::take(events),
                        diag: *diag,
                    };
                }
            }
        }

        let (x_a_des, x_r_des) = desired_poses(self.phase, &target, &self.params);
        let (fk_l, fk_r) = match self.fk_pair(models, state) {
            Ok(f) => f,
            Err(e) => {
                events.push(Event::SolverAbort {
                    t,
                    detail: e.to_string(),
                });
                diag.solver_aborted = true;
                return StepOutput {
                    qdot: [0.0; DUAL_DOF],
                    events: std::mem::take(events),
                    diag: *diag,
                };
            }
        };
        let (x_a, j_a) = absolute_task(models, state).expect("fk already validated");
        let (x_r, j_r) = relative_task(models, state).expect("fk already validated");
        let e_a = pose_error(&x_a, &x_a_des);
        let e_r = pose_error(&x_r, &x_r_des);
        diag.abs_pos_err = e_a.fixed_rows::<3>(0).norm();
        diag.abs_ori_err = e_a.fixed_rows::<3>(3).norm();
        diag.rel_pos_err = e_r.fixed_rows::<3>(0).norm();
        diag.rel_ori_err = e_r.fixed_rows::<3>(3).norm();

        let converged = diag.abs_pos_err <= self.params.tol_pos
            && diag.abs_ori_err <= self.params.tol_ori
            && diag.rel_pos_err <= self.params.tol_pos
            && diag.rel_ori_err <= self.params.tol_ori;
        if converged {
            match self.phase {
                HarvestPhase::Approach => self.transition(t, HarvestPhase::Harvest, events),
                HarvestPhase::Harvest => {
                    self.dwell_start = t;
                    self.transition(t, HarvestPhase::CutAndCollect, events);
                }
                HarvestPhase::Leave => {
                    self.target = None;
                    self.transition(t, HarvestPhase::SelectFruit, events);
                }
                _ => unreachable!(),
            }
            return StepOutput {
                qdot: [0.0; DUAL_DOF],
                events: std::mem::take(events),
                diag: *diag,
            };
        }
        if t - self.phase_start >= self.params.phase_timeout {
            match self.phase {
                HarvestPhase::Approach | HarvestPhase::Harvest => {
                    events.push(Event::TargetUnreachable {
                        t,
                        id: target.id,
                        reason: format!("phase {} timed out", self.phase),
                    });
                    events.push(Event::Blacklisted { t, id: target.id });
                    self.blacklist.insert(target.id);
                    self.transition(t, HarvestPhase::Leave, events);
                }
                HarvestPhase::Leave => {
                    // retreat blocked; give up on the retreat pose
                    self.target = None;
                    self.transition(t, HarvestPhase::SelectFruit, events);
                }
                _ => unreachable!(),
            }
            return StepOutput {
                qdot: [0.0; DUAL_DOF],
                events: std::mem::take(events),
                diag: *diag,
            };
        }

        // task velocities: clamped proportional control on both errors
        let v_a = clamp_norm(e_a.fixed_rows::<3>(0) * self.params.k_p_pos, self.params.v_max_lin);
        let w_a = clamp_norm(e_a.fixed_rows::<3>(3) * self.params.k_p_ori, self.params.v_max_ang);
        let v_r = clamp_norm(e_r.fixed_rows::<3>(0) * self.params.k_p_pos, self.params.v_max_lin);
        let w_r = clamp_norm(e_r.fixed_rows::<3>(3) * self.params.k_p_ori, self.params.v_max_ang);
        let xd_a = Vector6::new(v_a.x, v_a.y, v_a.z, w_a.x, w_a.y, w_a.z);
        let xd_r = Vector6::new(v_r.x, v_r.y, v_r.z, w_r.x, w_r.y, w_r.z);
        let task_a = masked_task(&j_a, &xd_a, &x_a_des.mask, Priority::Absolute);
        let task_r = masked_task(&j_r, &xd_r, &x_r_des.mask, Priority::Relative);

        let obstacles = self.obstacles(snapshot);
        let set = self.constraints(models, state, &[&fk_l, &fk_r], &obstacles, dt, diag);

        match self.solver.solve_hierarchy(&task_a, &task_r, &set) {
            Ok(HierarchyOutcome {
                qdot,
                level2_fallback,
                ..
            }) => {
                if level2_fallback {
                    events.push(Event::SolverFallback { t });
                }
                diag.constraint_violation = set.max_violation(&qdot);
                let mut out = [0.0; DUAL_DOF];
                for i in 0..DUAL_DOF {
                    out[i] = qdot[i];
                }
                StepOutput {
                    qdot: out,
                    events: std::mem::take(events),
                    diag: *diag,
                }
            }
            Err(e) => {
                events.push(Event::SolverAbort {
                    t,
                    detail: e.to_string(),
                });
                diag.solver_aborted = true;
                StepOutput {
                    qdot: [0.0; DUAL_DOF],
                    events: std::mem::take(events),
                    diag: *diag,
                }
            }
        }
    }
}
