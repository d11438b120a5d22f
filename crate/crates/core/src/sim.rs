//! Deterministic kinematic simulator.
//!
//! Interleaves 15 Hz perception ticks (render, track, localize) with the
//! control loop at `dt`, integrates joint velocities with explicit
//! Euler, and exports per-step CSV plus a newline-delimited event log
//! and a run summary. Identical scenario + seed reproduce the exports
//! byte for byte.

use std::io::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::controller::{
    Event, HarvestController, HarvestPhase, PerceptionSnapshot, StepDiagnostics,
};
use crate::hqp::HqpSolver;
use crate::kinematics::{DualArmState, DUAL_DOF};
use crate::perception::render::render_synthetic_frame;
use crate::perception::track::IouTracker;
use crate::perception::{localize_fruit, localize_tree, FruitRegistry};
use crate::scenario::Scenario;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite joint command at t = {t:.3} s")]
    NonFiniteCommand { t: f64 },
    #[error("export io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    /// Controller reached Done before the time budget.
    Done,
    /// Time budget exhausted first.
    Timeout,
}

/// One control-step record.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: f64,
    pub q: [f64; DUAL_DOF],
    pub qdot: [f64; DUAL_DOF],
    pub diag: StepDiagnostics,
    pub clamped: usize,
}

#[derive(Debug)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    pub events: Vec<Event>,
    pub outcome: RunOutcome,
    pub harvested: Vec<u64>,
    pub blacklisted: Vec<u64>,
    pub clamp_count: usize,
    pub solver_aborts: usize,
    pub level2_fallbacks: usize,
    pub seed: u64,
    pub wall_time_s: f64,
}

/// Explicit Euler step with joint-limit clamping. Returns how many
/// joints had to be clamped; with working constraint rows this is zero.
pub fn integrate(
    state: &mut DualArmState,
    qdot: &[f64; DUAL_DOF],
    dt: f64,
    q_min: &[f64; DUAL_DOF],
    q_max: &[f64; DUAL_DOF],
) -> usize {
    let mut clamped = 0;
    for i in 0..DUAL_DOF {
        let q = state.q[i] + qdot[i] * dt;
        let qc = q.clamp(q_min[i], q_max[i]);
        if qc != q {
            clamped += 1;
        }
        state.q[i] = qc;
    }
    clamped
}

/// Run a scenario to completion (Done) or until the time budget runs out.
pub fn run(scenario: &Scenario) -> Result<RunLog, SimError> {
    let wall_start = std::time::Instant::now();
    let models = scenario.models();
    let mut q_min = [0.0; DUAL_DOF];
    let mut q_max = [0.0; DUAL_DOF];
    for i in 0..DUAL_DOF / 2 {
        q_min[i] = models.left.q_min[i];
        q_max[i] = models.left.q_max[i];
        q_min[i + DUAL_DOF / 2] = models.right.q_min[i];
        q_max[i + DUAL_DOF / 2] = models.right.q_max[i];
    }

    let mut state = DualArmState::new(scenario.q0());
    let mut controller = HarvestController::new(
        scenario.controller,
        scenario.damper,
        HqpSolver::new(scenario.hqp.lambda),
    );
    let mut tracker = IouTracker::new(scenario.tracker);
    let mut registry = FruitRegistry::new(
        scenario.perception.jump_threshold,
        scenario.perception.expiry_frames,
    );
    let mut scene = scenario.scene.clone();
    let mut snapshot = PerceptionSnapshot::default();

    let dt = scenario.sim.dt;
    let period = 1.0 / scenario.sim.perception_hz;
    let mut next_perception = 0.0;
    let mut frame_index = 0u64;

    let mut records = Vec::new();
    let mut events = Vec::new();
    let mut clamp_count = 0usize;
    let mut solver_aborts = 0usize;
    let mut level2_fallbacks = 0usize;
    let mut outcome = RunOutcome::Timeout;

    let mut k = 0u64;
    loop {
        let t = k as f64 * dt;
        if t >= scenario.sim.max_time {
            break;
        }

        if t + 1e-9 >= next_perception {
            let out = render_synthetic_frame(&scene, &scenario.camera, frame_index);
            let boxes: Vec<_> = out.detections.iter().map(|(_, b)| *b).collect();
            for (id, bbox) in tracker.update(&boxes) {
                if let Ok(obs) = localize_fruit(&bbox, &out.frame, &scenario.camera) {
                    registry.observe(frame_index, id, &obs);
                }
            }
            registry.expire(frame_index);
            let tree = localize_tree(
                &out.frame,
                &scenario.perception.hsv,
                scenario.perception.depth_max,
                scenario.perception.min_trunk_pixels,
                &scenario.camera,
            )
            .ok();
            snapshot = PerceptionSnapshot {
                fruits: registry.iter().copied().collect(),
                tree,
            };
            next_perception += period;
            frame_index += 1;
        }

        let out = controller.step(t, dt, &models, &state, &snapshot);
        for ev in &out.events {
            match ev {
                Event::Harvested { id, .. } => remove_harvested_fruit(&mut scene, &snapshot, *id),
                Event::SolverAbort { .. } => solver_aborts += 1,
                Event::SolverFallback { .. } => level2_fallbacks += 1,
                _ => {}
            }
        }
        events.extend(out.events);

        if out.qdot.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFiniteCommand { t });
        }
        let clamped = integrate(&mut state, &out.qdot, dt, &q_min, &q_max);
        clamp_count += clamped;
        records.push(StepRecord {
            t,
            q: state.q,
            qdot: out.qdot,
            diag: out.diag,
            clamped,
        });

        if controller.phase() == HarvestPhase::Done {
            outcome = RunOutcome::Done;
            break;
        }
        k += 1;
    }

    Ok(RunLog {
        records,
        events,
        outcome,
        harvested: controller.harvested_ids().iter().copied().collect(),
        blacklisted: controller.blacklisted_ids().iter().copied().collect(),
        clamp_count,
        solver_aborts,
        level2_fallbacks,
        seed: scenario.sim.seed,
        wall_time_s: wall_start.elapsed().as_secs_f64(),
    })
}

/// The cut is instantaneous: drop the scene fruit nearest to the tracked
/// estimate so later frames no longer show it.
fn remove_harvested_fruit(
    scene: &mut crate::perception::render::SyntheticScene,
    snapshot: &PerceptionSnapshot,
    id: u64,
) {
    let Some(est) = snapshot.fruits.iter().find(|f| f.id == id) else {
        return;
    };
    let nearest = scene
        .fruits
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let d = (f.x - est.center.x).powi(2)
                + (f.y - est.center.y).powi(2)
                + (f.z - est.center.z).powi(2);
            (i, d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1));
    if let Some((i, d2)) = nearest {
        if d2.sqrt() < 0.1 {
            scene.fruits.remove(i);
        }
    }
}

#[derive(Serialize)]
struct Summary {
    outcome: RunOutcome,
    seed: u64,
    steps: usize,
    sim_time_s: f64,
    harvested: Vec<u64>,
    blacklisted: Vec<u64>,
    clamp_count: usize,
    solver_aborts: usize,
    level2_fallbacks: usize,
    min_dist_trunk: f64,
    min_dist_fruit: f64,
    min_dist_self: f64,
    max_constraint_violation: f64,
    /// Not deterministic; every other field and file is.
    wall_time_s: f64,
}

fn fold_min(records: &[StepRecord], f: impl Fn(&StepRecord) -> f64) -> f64 {
    records.iter().map(f).fold(f64::INFINITY, f64::min)
}

/// Write `steps.csv`, `events.jsonl` and `summary.json` into `out_dir`.
pub fn export(log: &RunLog, out_dir: &Path) -> Result<(), SimError> {
    std::fs::create_dir_all(out_dir)?;

    let mut csv = std::io::BufWriter::new(std::fs::File::create(out_dir.join("steps.csv"))?);
    write!(csv, "t,phase")?;
    for i in 0..DUAL_DOF {
        write!(csv, ",q{i}")?;
    }
    for i in 0..DUAL_DOF {
        write!(csv, ",qd{i}")?;
    }
    writeln!(
        csv,
        ",abs_pos_err,abs_ori_err,rel_pos_err,rel_ori_err,\
         min_dist_trunk,min_dist_fruit,min_dist_self,constraint_rows,clamped"
    )?;
    for r in &log.records {
        write!(csv, "{},{}", r.t, r.diag.phase)?;
        for v in r.q {
            write!(csv, ",{v}")?;
        }
        for v in r.qdot {
            write!(csv, ",{v}")?;
        }
        writeln!(
            csv,
            ",{},{},{},{},{},{},{},{},{}",
            r.diag.abs_pos_err,
            r.diag.abs_ori_err,
            r.diag.rel_pos_err,
            r.diag.rel_ori_err,
            r.diag.min_dist_trunk,
            r.diag.min_dist_fruit,
            r.diag.min_dist_self,
            r.diag.constraint_rows,
            r.clamped
        )?;
    }
    csv.flush()?;

    let mut ev = std::io::BufWriter::new(std::fs::File::create(out_dir.join("events.jsonl"))?);
    for e in &log.events {
        writeln!(ev, "{}", serde_json::to_string(e)?)?;
    }
    ev.flush()?;

    let summary = Summary {
        outcome: log.outcome,
        seed: log.seed,
        steps: log.records.len(),
        sim_time_s: log.records.last().map_or(0.0, |r| r.t),
        harvested: log.harvested.clone(),
        blacklisted: log.blacklisted.clone(),
        clamp_count: log.clamp_count,
        solver_aborts: log.solver_aborts,
        level2_fallbacks: log.level2_fallbacks,
        min_dist_trunk: fold_min(&log.records, |r| r.diag.min_dist_trunk),
        min_dist_fruit: fold_min(&log.records, |r| r.diag.min_dist_fruit),
        min_dist_self: fold_min(&log.records, |r| r.diag.min_dist_self),
        max_constraint_violation: log
            .records
            .iter()
            .map(|r| r.diag.constraint_violation)
            .fold(f64::NEG_INFINITY, f64::max),
        wall_time_s: log.wall_time_s,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(())
}
