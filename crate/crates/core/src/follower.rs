//! Follower-side emulation: integrates telecommands into a target pose,
//! servos the simulated instrument toward it, and tracks reach tasks.

use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{FrameAlignment, Telecommand};
use crate::kinematics::Pose;

#[derive(Debug, Error)]
pub enum FollowerError {
    #[error("telecommand {seq} carries a non-finite delta")]
    NonFiniteDelta { seq: u64 },
    #[error("follower is faulted")]
    Faulted,
    #[error("task fixture: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOutcome {
    Applied,
    /// Sequence number not newer than the last applied one; dropped.
    Stale,
}

/// Target and actual poses of the follower instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct FollowerState {
    pub target_pose: Pose,
    pub actual_pose: Pose,
    /// m/s
    pub max_linear_rate: f64,
    /// rad/s
    pub max_angular_rate: f64,
    pub last_seq_applied: Option<u64>,
    pub dropped: u64,
    pub faulted: bool,
    pub align: FrameAlignment,
}

impl FollowerState {
    pub const DEFAULT_LINEAR_RATE: f64 = 0.5;
    pub const DEFAULT_ANGULAR_RATE: f64 = std::f64::consts::PI;

    pub fn new(start: Pose, align: FrameAlignment) -> Self {
        Self {
            target_pose: start,
            actual_pose: start,
            max_linear_rate: Self::DEFAULT_LINEAR_RATE,
            max_angular_rate: Self::DEFAULT_ANGULAR_RATE,
            last_seq_applied: None,
            dropped: 0,
            faulted: false,
            align,
        }
    }

    pub fn with_rates(mut self, linear: f64, angular: f64) -> Self {
        assert!(linear > 0.0 && angular > 0.0, "servo rates must be positive");
        self.max_linear_rate = linear;
        self.max_angular_rate = angular;
        self
    }

    /// Integrates one telecommand into the target pose. Clutched commands
    /// only update orientation.
    pub fn apply_telecommand(&mut self, cmd: &Telecommand) -> Result<ApplyOutcome, FollowerError> {
        if self.faulted {
            return Err(FollowerError::Faulted);
        }
        if let Some(last) = self.last_seq_applied {
            if cmd.seq <= last {
                self.dropped += 1;
                return Ok(ApplyOutcome::Stale);
            }
        }
        if cmd.delta_p_scaled.iter().any(|v| !v.is_finite()) {
            self.faulted = true;
            return Err(FollowerError::NonFiniteDelta { seq: cmd.seq });
        }
        if !cmd.clutched {
            self.target_pose.position += cmd.delta_p_scaled;
        }
        self.target_pose.orientation = self.align.rotation * cmd.orientation;
        self.last_seq_applied = Some(cmd.seq);
        Ok(ApplyOutcome::Applied)
    }

    /// Moves the actual pose toward the target: straight line for position,
    /// shortest geodesic for orientation, each step clamped by its rate.
    pub fn regulate(&mut self, dt: f64) {
        assert!(dt > 0.0, "regulate needs a positive time step");
        let err = self.target_pose.position - self.actual_pose.position;
        let dist = err.norm();
        let max_step = self.max_linear_rate * dt;
        if dist <= max_step {
            self.actual_pose.position = self.target_pose.position;
        } else {
            self.actual_pose.position += err * (max_step / dist);
        }

        let angle = self.actual_pose.orientation.angle_to(&self.target_pose.orientation);
        let max_turn = self.max_angular_rate * dt;
        if angle <= max_turn {
            self.actual_pose.orientation = self.target_pose.orientation;
        } else {
            self.actual_pose.orientation =
                slerp_toward(&self.actual_pose.orientation, &self.target_pose.orientation, max_turn / angle);
        }
    }

    pub fn position_error(&self) -> f64 {
        (self.target_pose.position - self.actual_pose.position).norm()
    }

    pub fn angular_error(&self) -> f64 {
        self.actual_pose.orientation.angle_to(&self.target_pose.orientation)
    }
}

fn slerp_toward(from: &UnitQuaternion<f64>, to: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    // Rotate by a fraction of the relative rotation; stays on the short arc.
    let rel = from.rotation_to(to);
    match rel.axis_angle() {
        Some((axis, angle)) => UnitQuaternion::from_axis_angle(&axis, angle * t) * from,
        None => *to,
    }
}

/// Ordered reach targets in the follower frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachTask {
    pub id: String,
    #[serde(default = "default_version")]
    pub version: u32,
    /// Follower start position, meters.
    #[serde(default)]
    pub start: [f64; 3],
    pub waypoints: Vec<[f64; 3]>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_dwell")]
    pub dwell_ticks: u64,
}

fn default_version() -> u32 {
    1
}
fn default_tolerance() -> f64 {
    0.002
}
fn default_dwell() -> u64 {
    50
}

impl ReachTask {
    pub fn new(id: &str, start: Vector3<f64>, waypoints: Vec<Vector3<f64>>) -> Result<Self, FollowerError> {
        let task = Self {
            id: id.to_string(),
            version: 1,
            start: start.into(),
            waypoints: waypoints.into_iter().map(Into::into).collect(),
            tolerance: default_tolerance(),
            dwell_ticks: default_dwell(),
        };
        task.validate()?;
        Ok(task)
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Result<Self, FollowerError> {
        self.tolerance = tolerance;
        self.validate()?;
        Ok(self)
    }

    pub fn with_dwell(mut self, dwell_ticks: u64) -> Self {
        self.dwell_ticks = dwell_ticks;
        self
    }

    pub fn validate(&self) -> Result<(), FollowerError> {
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(FollowerError::Fixture(format!(
                "{}: tolerance must be > 0, got {}",
                self.id, self.tolerance
            )));
        }
        if self.waypoints.is_empty() {
            return Err(FollowerError::Fixture(format!("{}: no waypoints", self.id)));
        }
        let finite = |p: &[f64; 3]| p.iter().all(|v| v.is_finite());
        if !finite(&self.start) || !self.waypoints.iter().all(finite) {
            return Err(FollowerError::Fixture(format!("{}: non-finite coordinate", self.id)));
        }
        Ok(())
    }

    pub fn start(&self) -> Vector3<f64> {
        Vector3::from(self.start)
    }

    pub fn waypoint(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.waypoints[i])
    }

    /// Length of the polyline start -> waypoints.
    pub fn nominal_distance(&self) -> f64 {
        let mut prev = self.start();
        let mut total = 0.0;
        for i in 0..self.waypoints.len() {
            let w = self.waypoint(i);
            total += (w - prev).norm();
            prev = w;
        }
        total
    }

    pub fn from_json(text: &str) -> Result<Self, FollowerError> {
        let task: ReachTask =
            serde_json::from_str(text).map_err(|e| FollowerError::Fixture(e.to_string()))?;
        task.validate()?;
        Ok(task)
    }

    pub fn load(path: &Path) -> Result<Self, FollowerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FollowerError::Fixture(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskStatus {
    Active { waypoint: usize },
    Completed { tick: u64 },
}

/// Dwell-based waypoint progression.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskTracker {
    task: ReachTask,
    index: usize,
    inside_for: u64,
    completed_at: Option<u64>,
}

impl TaskTracker {
    pub fn new(task: ReachTask) -> Self {
        Self {
            task,
            index: 0,
            inside_for: 0,
            completed_at: None,
        }
    }

    pub fn task(&self) -> &ReachTask {
        &self.task
    }

    pub fn status(&self) -> TaskStatus {
        match self.completed_at {
            Some(tick) => TaskStatus::Completed { tick },
            None => TaskStatus::Active {
                waypoint: self.index,
            },
        }
    }

    /// A waypoint is reached once the position has been within tolerance
    /// for `dwell_ticks` consecutive updates (at least one).
    pub fn update(&mut self, position: &Vector3<f64>, tick: u64) -> TaskStatus {
        if self.completed_at.is_some() {
            return self.status();
        }
        let inside = (position - self.task.waypoint(self.index)).norm() <= self.task.tolerance;
        if inside {
            self.inside_for += 1;
        } else {
            self.inside_for = 0;
        }
        if inside && self.inside_for >= self.task.dwell_ticks.max(1) {
            self.inside_for = 0;
            if self.index + 1 == self.task.waypoints.len() {
                self.completed_at = Some(tick);
            } else {
                self.index += 1;
            }
        }
        self.status()
    }
}

/// Pure-function form of [`TaskTracker::update`].
pub fn task_progress(tracker: &TaskTracker, actual_pose: &Pose, tick: u64) -> (TaskTracker, TaskStatus) {
    let mut next = tracker.clone();
    let status = next.update(&actual_pose.position, tick);
    (next, status)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn cmd(seq: u64, d: Vector3<f64>) -> Telecommand {
        Telecommand {
            seq,
            send_tick: seq,
            delta_p_scaled: d,
            orientation: UnitQuaternion::identity(),
            gripper: 0.0,
            clutched: false,
        }
    }

    #[test]
    fn single_step_integration() {
        let mut f = FollowerState::new(Pose::identity(), FrameAlignment::identity());
        f.apply_telecommand(&cmd(0, Vector3::new(0.003, 0.0, 0.0))).unwrap();
        assert_eq!(f.target_pose.position, Vector3::new(0.003, 0.0, 0.0));
    }

    #[test]
    fn hundred_steps_telescope() {
        let mut f = FollowerState::new(Pose::identity(), FrameAlignment::identity());
        for i in 0..100 {
            f.apply_telecommand(&cmd(i, Vector3::new(0.001, 0.0, 0.0))).unwrap();
        }
        assert_abs_diff_eq!(f.target_pose.position, Vector3::new(0.1, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn stale_dropped() {
        let mut f = FollowerState::new(Pose::identity(), FrameAlignment::identity());
        f.apply_telecommand(&cmd(5, Vector3::new(0.01, 0.0, 0.0))).unwrap();
        let before = f.target_pose;
        assert_eq!(f.apply_telecommand(&cmd(5, Vector3::new(1.0, 0.0, 0.0))).unwrap(), ApplyOutcome::Stale);
        assert_eq!(f.apply_telecommand(&cmd(3, Vector3::new(1.0, 0.0, 0.0))).unwrap(), ApplyOutcome::Stale);
        assert_eq!(f.target_pose, before);
        assert_eq!(f.dropped, 2);
        assert_eq!(f.last_seq_applied, Some(5));
    }

    #[test]
    fn non_finite_rejected() {
        let mut f = FollowerState::new(Pose::identity(), FrameAlignment::identity());
        assert!(f.apply_telecommand(&cmd(0, Vector3::new(f64::NAN, 0.0, 0.0))).is_err());
        assert!(f.faulted);
        assert_eq!(f.target_pose, Pose::identity());
    }

    #[test]
    fn clutched_updates_orientation_only() {
        let align = FrameAlignment::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2)).unwrap();
        let mut f = FollowerState::new(Pose::identity(), align);
        let q = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.3);
        let mut c = cmd(0, Vector3::zeros());
        c.clutched = true;
        c.orientation = q;
        f.apply_telecommand(&c).unwrap();
        assert_eq!(f.target_pose.position, Vector3::zeros());
        assert!(f.target_pose.orientation.angle_to(&(align.rotation * q)) < 1e-12);
    }

    #[test]
    fn regulate_fixed_point() {
        let start = Pose::new(Vector3::new(0.1, 0.2, 0.3), UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3));
        let mut f = FollowerState::new(start, FrameAlignment::identity());
        f.regulate(0.001);
        assert_eq!(f.actual_pose, start);
    }

    #[test]
    fn regulate_linear_clamped_step() {
        let mut f = FollowerState::new(Pose::identity(), FrameAlignment::identity()).with_rates(0.5, PI);
        f.target_pose.position = Vector3::new(0.1, 0.0, 0.0);
        let mut ticks = 0;
        let mut prev = f.position_error();
        while f.position_error() > 0.0 {
            f.regulate(0.001);
            ticks += 1;
            let e = f.position_error();
            if e > 0.0 {
                assert_abs_diff_eq!(prev - e, 5e-4, epsilon = 1e-12);
            }
            prev = e;
            assert!(ticks <= 201);
        }
        // 0.1 / 5e-4 = 200 clamped steps.
        assert!((199..=201).contains(&ticks), "{ticks}");
    }

    #[test]
    fn regulate_angular_converges_in_half_second() {
        let mut f = FollowerState::new(Pose::identity(), FrameAlignment::identity()).with_rates(0.5, PI);
        f.target_pose.orientation = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), FRAC_PI_2);
        let mut ticks = 0;
        let mut prev = f.angular_error();
        while f.angular_error() > 1e-9 {
            f.regulate(0.001);
            ticks += 1;
            assert!(f.angular_error() <= prev + 1e-12);
            prev = f.angular_error();
            assert!(ticks <= 502);
        }
        // (pi/2) / (pi * 1e-3) = 500 ticks.
        assert!(ticks >= 499);
    }

    #[test]
    fn dwell_advances_index() {
        let task = ReachTask::new("t", Vector3::zeros(), vec![Vector3::new(0.01, 0.0, 0.0), Vector3::new(0.02, 0.0, 0.0)])
            .unwrap()
            .with_dwell(5);
        let mut tr = TaskTracker::new(task);
        let at = Vector3::new(0.01, 0.0, 0.0);
        for t in 0..4 {
            assert_eq!(tr.update(&at, t), TaskStatus::Active { waypoint: 0 });
        }
        assert_eq!(tr.update(&at, 4), TaskStatus::Active { waypoint: 1 });
    }

    #[test]
    fn leaving_before_dwell_resets() {
        let task = ReachTask::new("t", Vector3::zeros(), vec![Vector3::new(0.01, 0.0, 0.0)]).unwrap().with_dwell(5);
        let mut tr = TaskTracker::new(task);
        let at = Vector3::new(0.01, 0.0, 0.0);
        let away = Vector3::new(0.5, 0.0, 0.0);
        for t in 0..4 {
            tr.update(&at, t);
        }
        tr.update(&away, 4);
        for t in 5..9 {
            assert_eq!(tr.update(&at, t), TaskStatus::Active { waypoint: 0 });
        }
        assert_eq!(tr.update(&at, 9), TaskStatus::Completed { tick: 9 });
        assert_eq!(tr.update(&away, 10), TaskStatus::Completed { tick: 9 });
    }

    /// Replay oracle: walk positions one tick at a time with plain loops.
    fn replay_completion(task: &ReachTask, positions: &[Vector3<f64>]) -> Option<u64> {
        let mut idx = 0;
        let mut run = 0;
        for (t, p) in positions.iter().enumerate() {
            let w = Vector3::from(task.waypoints[idx]);
            let d = ((p.x - w.x).powi(2) + (p.y - w.y).powi(2) + (p.z - w.z).powi(2)).sqrt();
            run = if d <= task.tolerance { run + 1 } else { 0 };
            if run >= task.dwell_ticks {
                run = 0;
                idx += 1;
                if idx == task.waypoints.len() {
                    return Some(t as u64);
                }
            }
        }
        None
    }

    #[test]
    fn scripted_run_matches_replay_oracle() {
        let task = ReachTask::new(
            "three",
            Vector3::zeros(),
            vec![Vector3::new(0.02, 0.0, 0.0), Vector3::new(0.02, 0.02, 0.0), Vector3::new(0.0, 0.02, 0.01)],
        )
        .unwrap();
        // Straight-line motion at 5e-5 m/tick, pausing 60 ticks at each waypoint.
        let mut positions = Vec::new();
        let mut p = task.start();
        for i in 0..task.waypoints.len() {
            let w = task.waypoint(i);
            while (w - p).norm() > 5e-5 {
                p += (w - p).normalize() * 5e-5;
                positions.push(p);
            }
            p = w;
            for _ in 0..60 {
                positions.push(p);
            }
        }
        let mut tracker = TaskTracker::new(task.clone());
        let mut done = None;
        for (t, pos) in positions.iter().enumerate() {
            let (next, status) = task_progress(&tracker, &Pose::from_position(*pos), t as u64);
            tracker = next;
            if let TaskStatus::Completed { tick } = status {
                done = Some(tick);
                break;
            }
        }
        assert!(done.is_some());
        assert_eq!(done, replay_completion(&task, &positions));
    }

    #[test]
    fn fixture_json() {
        let t = ReachTask::from_json(r#"{"id":"a","waypoints":[[0.1,0,0]]}"#).unwrap();
        assert_eq!(t.tolerance, 0.002);
        assert_eq!(t.dwell_ticks, 50);
        assert_eq!(t.version, 1);
        assert!(ReachTask::from_json(r#"{"id":"a","waypoints":[]}"#).is_err());
        assert!(ReachTask::from_json(r#"{"id":"a","waypoints":[[0,0,0]],"tolerance":0}"#).is_err());
    }

    proptest! {
        #[test]
        fn servo_error_non_increasing(target in proptest::array::uniform3(-1.0f64..1.0),
                                      r in proptest::array::uniform3(-3.0f64..3.0)) {
            let mut f = FollowerState::new(Pose::identity(), FrameAlignment::identity());
            f.target_pose = Pose::new(Vector3::from(target), UnitQuaternion::from_euler_angles(r[0], r[1], r[2]));
            let mut prev = f.position_error();
            let mut prev_ang = f.angular_error();
            for _ in 0..4000 {
                f.regulate(0.001);
                prop_assert!(f.position_error() <= prev + 1e-15);
                prop_assert!(f.angular_error() <= prev_ang + 1e-9);
                prev = f.position_error();
                prev_ang = f.angular_error();
            }
            prop_assert!(f.position_error() < 1e-6);
            prop_assert!(f.angular_error() < 1e-6);
        }

        #[test]
        fn last_seq_monotone(seqs in proptest::collection::vec(0u64..50, 1..100)) {
            let mut f = FollowerState::new(Pose::identity(), FrameAlignment::identity());
            let mut prev = None;
            for s in seqs {
                f.apply_telecommand(&cmd(s, Vector3::new(1e-3, 0.0, 0.0))).unwrap();
                prop_assert!(f.last_seq_applied >= prev);
                prev = f.last_seq_applied;
            }
        }
    }
}
