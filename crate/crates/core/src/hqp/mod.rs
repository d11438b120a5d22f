//! Two-level Hierarchical Quadratic Programming velocity solver with
//! joint-limit and velocity-damper inequality constraints.
//!
//! Level 1 tracks the absolute task under the shared constraint set
//! `A qd <= b`; level 2 tracks the relative task under the same set plus
//! the task-space lock `J_a qd = J_a qd*_a`, so the lower-priority task
//! can never disturb the higher-priority optimum.

mod solver;

pub use solver::{solve_qp, QpError, QpSolution};

pub use solver::oracle;

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::kinematics::DUAL_DOF;

/// Task priority in the two-level hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Priority {
    Absolute,
    Relative,
}

/// One task for the hierarchy: masked rows are already removed, so
/// `jacobian` has at most 6 rows.
#[derive(Debug, Clone)]
pub struct QpTask {
    pub jacobian: DMatrix<f64>,
    pub xdot_des: DVector<f64>,
    pub priority: Priority,
}

impl QpTask {
    pub fn new(jacobian: DMatrix<f64>, xdot_des: DVector<f64>, priority: Priority) -> Self {
        assert_eq!(jacobian.nrows(), xdot_des.len());
        assert!(jacobian.nrows() <= 6);
        assert_eq!(jacobian.ncols(), DUAL_DOF);
        Self {
            jacobian,
            xdot_des,
            priority,
        }
    }
}

/// Origin of a constraint row, kept for logging and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSource {
    JointLimit,
    SelfCollision,
    Trunk,
    Fruit,
}

/// Stacked linear inequalities `A qd <= b` with per-row provenance.
#[derive(Debug, Clone, Default)]
pub struct ConstraintSet {
    rows: Vec<(RowDVector<f64>, f64, RowSource)>,
}

impl ConstraintSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, a: RowDVector<f64>, b: f64, source: RowSource) {
        assert_eq!(a.len(), DUAL_DOF);
        assert!(a.iter().all(|v| v.is_finite()) && b.is_finite());
        self.rows.push((a, b, source));
    }

    pub fn extend(&mut self, other: ConstraintSet) {
        self.rows.extend(other.rows);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = RowSource> + '_ {
        self.rows.iter().map(|(_, _, s)| *s)
    }

    pub fn matrices(&self) -> (DMatrix<f64>, DVector<f64>) {
        let k = self.rows.len();
        let mut a = DMatrix::zeros(k, DUAL_DOF);
        let mut b = DVector::zeros(k);
        for (i, (row, bi, _)) in self.rows.iter().enumerate() {
            a.set_row(i, row);
            b[i] = *bi;
        }
        (a, b)
    }

    /// Max of `A qd - b` over all rows; <= 0 when feasible.
    pub fn max_violation(&self, qd: &DVector<f64>) -> f64 {
        self.rows
            .iter()
            .map(|(row, b, _)| row.dot(&qd.transpose()) - b)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Velocity-damper parameters: activation distance, safety distance, and
/// convergence speed.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DamperParams {
    pub d_i: f64,
    pub d_s: f64,
    pub xi: f64,
}

impl DamperParams {
    pub fn new(d_i: f64, d_s: f64, xi: f64) -> Self {
        assert!(d_i > d_s && d_s > 0.0 && xi > 0.0, "need d_i > d_s > 0 and xi > 0");
        Self { d_i, d_s, xi }
    }

    /// Deserialized values bypass `new`; re-check the invariants.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.d_i > self.d_s && self.d_s > 0.0 && self.xi > 0.0) {
            return Err("need d_i > d_s > 0 and xi > 0".into());
        }
        Ok(())
    }
}

impl Default for DamperParams {
    fn default() -> Self {
        Self::new(0.20, 0.05, 1.0)
    }
}

/// Velocity-damper bound: below the activation distance the approach
/// speed is limited to `dd* = -xi (d - d_s) / (d_i - d_s)`; above it the
/// pair is unconstrained. The emitted constraint is `dd >= dd*`, one
/// sided: separating motion is never restricted.
pub fn damper_bound(d: f64, p: &DamperParams) -> Option<f64> {
    assert!(d.is_finite());
    if d > p.d_i {
        return None;
    }
    // past d_s the bound turns positive (forced retreat); capping it at
    // xi keeps a deeply penetrated state recoverable instead of making
    // the QP infeasible
    Some((-p.xi * (d - p.d_s) / (p.d_i - p.d_s)).min(p.xi))
}

/// A monitored body pair: current distance and the row mapping joint
/// velocities to the distance rate, `dd = ddot_row * qd`.
#[derive(Debug, Clone)]
pub struct CollisionPair {
    pub distance: f64,
    pub ddot_row: RowDVector<f64>,
    pub source: RowSource,
}

/// One inequality row per pair within the activation distance:
/// `-ddot_row * qd <= -dd*`, i.e. `dd >= dd*`.
pub fn collision_rows(pairs: &[CollisionPair], params: &DamperParams) -> ConstraintSet {
    let mut set = ConstraintSet::new();
    for pair in pairs {
        let Some(ddot_star) = damper_bound(pair.distance, params) else {
            continue;
        };
        if pair.ddot_row.iter().all(|v| v.abs() < 1e-12) {
            log::warn!(
                "degenerate collision pair (zero distance-rate row, source {:?}); row skipped",
                pair.source
            );
            continue;
        }
        set.push(-pair.ddot_row.clone(), -ddot_star, pair.source);
    }
    set
}

/// Joint-limit rows: velocity bounds and position limits rewritten on
/// `qd` for one Euler step. A state already outside its limits yields
/// bounds that only permit inward motion.
pub fn joint_limit_rows(
    q: &[f64; DUAL_DOF],
    q_min: &[f64; DUAL_DOF],
    q_max: &[f64; DUAL_DOF],
    v_max: &[f64; DUAL_DOF],
    dt: f64,
) -> ConstraintSet {
    assert!(dt > 0.0);
    let mut set = ConstraintSet::new();
    for i in 0..DUAL_DOF {
        let ub = ((q_max[i] - q[i]) / dt).clamp(-v_max[i], v_max[i]);
        let lb = ((q_min[i] - q[i]) / dt).clamp(-v_max[i], v_max[i]);
        let mut row = RowDVector::zeros(DUAL_DOF);
        row[i] = 1.0;
        set.push(row.clone(), ub, RowSource::JointLimit);
        row[i] = -1.0;
        set.push(row, -lb, RowSource::JointLimit);
    }
    set
}

/// Outcome of one hierarchical solve.
#[derive(Debug, Clone)]
pub struct HierarchyOutcome {
    pub qdot: DVector<f64>,
    /// Level-1 solution, kept for the hierarchy invariant check.
    pub qdot_level1: DVector<f64>,
    /// True when level 2 was infeasible and the level-1 solution was
    /// returned instead.
    pub level2_fallback: bool,
}

/// Two-level HQP solver. Holds the regularization weight; construction
/// data is immutable and one instance is meant to live per control loop.
#[derive(Debug, Clone)]
pub struct HqpSolver {
    /// Tikhonov weight on `||qd||^2`, keeps every level strictly convex
    /// through singular Jacobians.
    pub lambda: f64,
}

impl Default for HqpSolver {
    fn default() -> Self {
        Self { lambda: 1e-6 }
    }
}

impl HqpSolver {
    pub fn new(lambda: f64) -> Self {
        assert!(lambda > 0.0);
        Self { lambda }
    }

    /// Least-squares tracking of a single task under `A qd <= b` and
    /// optional equality rows: minimizes
    /// `||J qd - xd||^2 + lambda ||qd||^2`.
    pub fn solve_task(
        &self,
        task: &QpTask,
        constraints: &ConstraintSet,
        eq_a: &DMatrix<f64>,
        eq_b: &DVector<f64>,
    ) -> Result<QpSolution, QpError> {
        let j = &task.jacobian;
        let h = j.transpose() * j * 2.0 + DMatrix::identity(DUAL_DOF, DUAL_DOF) * (2.0 * self.lambda);
        let g = -(j.transpose() * &task.xdot_des) * 2.0;
        let (a, b) = constraints.matrices();
        solve_qp(&h, &g, eq_a, eq_b, &a, &b)
    }

    /// Bilevel solve: absolute task first, then the relative task locked
    /// to the absolute optimum through `J_a qd = J_a qd*_a`.
    pub fn solve_hierarchy(
        &self,
        task_a: &QpTask,
        task_r: &QpTask,
        constraints: &ConstraintSet,
    ) -> Result<HierarchyOutcome, QpError> {
        debug_assert_eq!(task_a.priority, Priority::Absolute);
        debug_assert_eq!(task_r.priority, Priority::Relative);
        let none_a = DMatrix::zeros(0, DUAL_DOF);
        let none_b = DVector::zeros(0);
        let level1 = self.solve_task(task_a, constraints, &none_a, &none_b)?;

        let eq_a = task_a.jacobian.clone();
        let eq_b = &task_a.jacobian * &level1.x;
        match self.solve_task(task_r, constraints, &eq_a, &eq_b) {
            Ok(level2) => Ok(HierarchyOutcome {
                qdot: level2.x,
                qdot_level1: level1.x,
                level2_fallback: false,
            }),
            Err(QpError::Infeasible) => {
                log::warn!("level-2 QP infeasible; falling back to level-1 solution");
                Ok(HierarchyOutcome {
                    qdot: level1.x.clone(),
                    qdot_level1: level1.x,
                    level2_fallback: true,
                })
            }
            Err(e) => Err(e),
        }
    }
}
