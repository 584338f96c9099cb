//! Synthetic master-side operators.
//!
//! Both operators only ever see the follower through delayed feedback.
//!
//! * `Scripted` knows the scaling config and the frame alignment, so it maps
//!   each follower waypoint straight into master space using the steady
//!   gain at its own hand speed, and moves there at constant speed.
//!   Completion times then have a closed form.
//! * `MoveAndWait` does not know the gain. It moves a burst toward the goal
//!   as seen in feedback, then holds until feedback shows the response has
//!   settled, and sizes later bursts from the response gain it has observed.

use std::collections::VecDeque;
use std::f64::consts::TAU;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::FeedbackMsg;
use crate::controller::{FrameAlignment, ScalingConfig};
use crate::follower::ReachTask;
use crate::kinematics::Pose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("invalid operator spec: {0}")]
    InvalidSpec(String),
    #[error("operator stalled at tick {tick}: no feedback for {waited} ticks")]
    FeedbackStarved { tick: u64, waited: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Scripted,
    MoveAndWait,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub kind: OperatorKind,
    /// Master hand speed, m/s.
    pub speed: f64,
    /// Master-space burst length for move-and-wait, m.
    #[serde(default = "default_burst")]
    pub burst_length: f64,
    /// Follower-space distance at which a burst counts as confirmed, m.
    #[serde(default = "default_wait_tolerance")]
    pub wait_tolerance: f64,
    /// Per-sinusoid tremor amplitude, m.
    #[serde(default)]
    pub tremor_amplitude: f64,
    #[serde(default)]
    pub seed: u64,
    /// Consecutive feedback samples that must stay within
    /// `settle_tolerance` of each other before a wait can end.
    #[serde(default = "default_settle")]
    pub settle_ticks: u64,
    #[serde(default = "default_settle_tolerance")]
    pub settle_tolerance: f64,
    /// Upper bound on a single wait once the burst has finished.
    #[serde(default = "default_patience")]
    pub patience_ticks: u64,
    #[serde(default = "default_feedback_timeout")]
    pub feedback_timeout_ticks: u64,
}

fn default_burst() -> f64 {
    0.05
}
fn default_wait_tolerance() -> f64 {
    0.001
}
fn default_settle() -> u64 {
    50
}
fn default_settle_tolerance() -> f64 {
    1e-4
}
fn default_patience() -> u64 {
    3000
}
fn default_feedback_timeout() -> u64 {
    5000
}

impl OperatorSpec {
    pub fn scripted(speed: f64) -> Self {
        Self {
            kind: OperatorKind::Scripted,
            speed,
            burst_length: default_burst(),
            wait_tolerance: default_wait_tolerance(),
            tremor_amplitude: 0.0,
            seed: 0,
            settle_ticks: default_settle(),
            settle_tolerance: default_settle_tolerance(),
            patience_ticks: default_patience(),
            feedback_timeout_ticks: default_feedback_timeout(),
        }
    }

    pub fn move_and_wait(speed: f64, burst_length: f64) -> Self {
        Self {
            kind: OperatorKind::MoveAndWait,
            burst_length,
            ..Self::scripted(speed)
        }
    }

    pub fn validate(&self) -> Result<(), OperatorError> {
        let bad = |m: String| Err(OperatorError::InvalidSpec(m));
        if !(self.speed.is_finite() && self.speed > 0.0) {
            return bad(format!("speed must be > 0, got {}", self.speed));
        }
        if !(self.tremor_amplitude.is_finite() && self.tremor_amplitude >= 0.0) {
            return bad(format!("tremor_amplitude must be >= 0, got {}", self.tremor_amplitude));
        }
        if self.kind == OperatorKind::MoveAndWait {
            if !(self.burst_length.is_finite() && self.burst_length > 0.0) {
                return bad(format!("burst_length must be > 0, got {}", self.burst_length));
            }
            if !(self.wait_tolerance.is_finite() && self.wait_tolerance > 0.0) {
                return bad(format!("wait_tolerance must be > 0, got {}", self.wait_tolerance));
            }
            if !(self.settle_tolerance.is_finite() && self.settle_tolerance > 0.0) {
                return bad(format!("settle_tolerance must be > 0, got {}", self.settle_tolerance));
            }
        }
        Ok(())
    }
}

/// Constant-speed straight-line step toward `goal`; lands exactly on the
/// goal when it is within one step.
pub fn scripted_step(speed: f64, dt: f64, current: &Vector3<f64>, goal: &Vector3<f64>) -> Vector3<f64> {
    let to_go = goal - current;
    let remaining = to_go.norm();
    let step = speed * dt;
    if remaining <= step * (1.0 + 1e-9) {
        *goal
    } else {
        current + to_go * (step / remaining)
    }
}

const TREMOR_COMPONENTS: usize = 3;

/// Seeded mixture of sinusoids in the 8-12 Hz band, each with amplitude
/// `tremor_amplitude` along its own random unit direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tremor {
    amplitude: f64,
    components: [(f64, f64, Vector3<f64>); TREMOR_COMPONENTS],
}

impl Tremor {
    pub fn new(amplitude: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_656d_6f72);
        let components = std::array::from_fn(|_| {
            let freq = rng.random_range(8.0..=12.0);
            let phase = rng.random_range(0.0..TAU);
            let z: f64 = rng.random_range(-1.0..=1.0);
            let az: f64 = rng.random_range(0.0..TAU);
            let r = (1.0 - z * z).sqrt();
            (freq, phase, Vector3::new(r * az.cos(), r * az.sin(), z))
        });
        Self {
            amplitude,
            components,
        }
    }

    pub fn from_spec(spec: &OperatorSpec) -> Self {
        Self::new(spec.tremor_amplitude, spec.seed)
    }

    pub fn component_count(&self) -> usize {
        TREMOR_COMPONENTS
    }

    pub fn offset(&self, tick: u64, tick_hz: f64) -> Vector3<f64> {
        if self.amplitude == 0.0 {
            return Vector3::zeros();
        }
        let t = tick as f64 / tick_hz;
        self.components
            .iter()
            .map(|(f, ph, dir)| dir * (self.amplitude * (TAU * f * t + ph).sin()))
            .sum()
    }

    pub fn apply(&self, pose: &Pose, tick: u64, tick_hz: f64) -> Pose {
        Pose::new(pose.position + self.offset(tick, tick_hz), pose.orientation)
    }
}

pub fn add_tremor(pose: &Pose, spec: &OperatorSpec, tick: u64, tick_hz: f64) -> Pose {
    Tremor::from_spec(spec).apply(pose, tick, tick_hz)
}

#[derive(Debug, Clone, PartialEq)]
enum Phase {
    /// Deciding what to do next from the latest feedback.
    Plan,
    /// Scripted: travelling to (or holding at) the current master waypoint.
    Travel { goal: Vector3<f64> },
    Burst {
        goal: Vector3<f64>,
        fb_start: Vector3<f64>,
        predicted: Vector3<f64>,
        length: f64,
    },
    Wait {
        fb_start: Vector3<f64>,
        predicted: Vector3<f64>,
        length: f64,
        since: u64,
    },
    /// Holding still until feedback confirms the current waypoint.
    Confirm,
    Done,
}

/// Per-burst record, kept for analysis and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurstRecord {
    pub start_tick: u64,
    pub end_tick: u64,
    pub wait_end_tick: u64,
    pub length: f64,
}

#[derive(Debug, Clone)]
pub struct Operator {
    spec: OperatorSpec,
    tick_hz: f64,
    task: ReachTask,
    align: FrameAlignment,
    master_origin: Vector3<f64>,
    /// Steady follower/master gain the scripted operator plans with.
    gain: f64,
    nominal: Pose,
    tremor: Tremor,
    latest: Option<FeedbackMsg>,
    last_feedback_tick: u64,
    history: VecDeque<Vector3<f64>>,
    waypoint: usize,
    confirmations: u64,
    phase: Phase,
    gain_estimate: f64,
    current_burst_start: u64,
    bursts_started: usize,
    bursts: Vec<BurstRecord>,
}

impl Operator {
    /// `scaling` is only consulted by the scripted operator.
    pub fn new(
        spec: OperatorSpec,
        task: ReachTask,
        master_start: Pose,
        align: FrameAlignment,
        scaling: ScalingConfig,
        tick_hz: f64,
    ) -> Result<Self, OperatorError> {
        spec.validate()?;
        let gain = scaling.gamma_c + scaling.gamma_v * spec.speed;
        if spec.kind == OperatorKind::Scripted && !(gain.is_finite() && gain > 0.0) {
            return Err(OperatorError::InvalidSpec(
                "scripted operator needs a positive scaling gain to map waypoints into master space".into(),
            ));
        }
        if !(tick_hz.is_finite() && tick_hz > 0.0) {
            return Err(OperatorError::InvalidSpec(format!("tick_hz must be > 0, got {tick_hz}")));
        }
        task.validate()
            .map_err(|e| OperatorError::InvalidSpec(e.to_string()))?;
        Ok(Self {
            tremor: Tremor::from_spec(&spec),
            spec,
            tick_hz,
            task,
            align,
            master_origin: master_start.position,
            gain,
            nominal: master_start,
            latest: None,
            last_feedback_tick: 0,
            history: VecDeque::new(),
            waypoint: 0,
            confirmations: 0,
            phase: Phase::Plan,
            gain_estimate: 1.0,
            current_burst_start: 0,
            bursts_started: 0,
            bursts: Vec::new(),
        })
    }

    pub fn spec(&self) -> &OperatorSpec {
        &self.spec
    }

    pub fn nominal_pose(&self) -> &Pose {
        &self.nominal
    }

    pub fn latest_feedback(&self) -> Option<&FeedbackMsg> {
        self.latest.as_ref()
    }

    /// Bursts whose wait has finished.
    pub fn bursts(&self) -> &[BurstRecord] {
        &self.bursts
    }

    pub fn bursts_started(&self) -> usize {
        self.bursts_started
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// Master-space image of follower waypoint `i` for the scripted operator.
    pub fn master_waypoint(&self, i: usize) -> Vector3<f64> {
        let follower_delta = self.task.waypoint(i) - self.task.start();
        self.master_origin + self.align.rotation.inverse() * (follower_delta / self.gain)
    }

    /// Feeds delivered feedback; stale sequence numbers are ignored.
    pub fn observe_feedback<I: IntoIterator<Item = FeedbackMsg>>(&mut self, msgs: I, tick: u64) {
        let settle = self.spec.settle_ticks.max(1) as usize;
        for msg in msgs {
            if let Some(prev) = &self.latest {
                if msg.seq <= prev.seq {
                    continue;
                }
            }
            self.last_feedback_tick = tick;
            let p = msg.follower_pose.position;
            self.history.push_back(p);
            while self.history.len() > settle {
                self.history.pop_front();
            }
            let inside = (p - self.task.waypoint(self.waypoint)).norm() <= self.task.tolerance;
            self.confirmations = if inside { self.confirmations + 1 } else { 0 };
            self.latest = Some(msg);
        }
    }

    fn settled(&self) -> bool {
        let settle = self.spec.settle_ticks.max(1) as usize;
        match self.history.back() {
            Some(last) if self.history.len() >= settle => self
                .history
                .iter()
                .all(|p| (p - last).norm() <= self.spec.settle_tolerance),
            _ => false,
        }
    }

    fn waypoint_confirmed(&self) -> bool {
        self.confirmations >= self.task.dwell_ticks.max(1)
    }

    fn advance_waypoint(&mut self) {
        if self.waypoint + 1 < self.task.waypoints.len() {
            self.waypoint += 1;
            self.confirmations = 0;
            // Re-evaluate the confirmation count against the new waypoint.
            if let Some(fb) = &self.latest {
                if (fb.follower_pose.position - self.task.waypoint(self.waypoint)).norm()
                    <= self.task.tolerance
                {
                    self.confirmations = 1;
                }
            }
            self.phase = Phase::Plan;
        } else {
            self.phase = Phase::Done;
        }
    }

    /// Advances one tick and returns the master pose (tremor included).
    pub fn step(&mut self, tick: u64) -> Result<Pose, OperatorError> {
        let waited = tick.saturating_sub(self.last_feedback_tick);
        if waited > self.spec.feedback_timeout_ticks && self.phase != Phase::Done {
            return Err(OperatorError::FeedbackStarved { tick, waited });
        }
        match self.spec.kind {
            OperatorKind::Scripted => self.step_scripted(),
            OperatorKind::MoveAndWait => self.step_move_and_wait(tick),
        }
        Ok(self.tremor.apply(&self.nominal, tick, self.tick_hz))
    }

    fn step_scripted(&mut self) {
        let dt = 1.0 / self.tick_hz;
        if self.phase == Phase::Plan {
            self.phase = Phase::Travel {
                goal: self.master_waypoint(self.waypoint),
            };
        }
        if let Phase::Travel { goal } = self.phase {
            self.nominal.position = scripted_step(self.spec.speed, dt, &self.nominal.position, &goal);
            if self.nominal.position == goal {
                self.phase = Phase::Confirm;
            }
            return;
        }
        if self.phase == Phase::Confirm && self.waypoint_confirmed() {
            self.advance_waypoint();
        }
    }

    fn step_move_and_wait(&mut self, tick: u64) {
        let dt = 1.0 / self.tick_hz;
        loop {
            match self.phase.clone() {
                Phase::Done | Phase::Travel { .. } => return,
                Phase::Plan => {
                    let Some(fb) = self.latest else { return };
                    let p = fb.follower_pose.position;
                    let error = self.task.waypoint(self.waypoint) - p;
                    if error.norm() <= self.task.tolerance {
                        self.phase = Phase::Confirm;
                        continue;
                    }
                    let dir_follower = error / error.norm();
                    let length = (error.norm() / self.gain_estimate).min(self.spec.burst_length);
                    let dir_master = self.align.rotation.inverse() * dir_follower;
                    self.phase = Phase::Burst {
                        goal: self.nominal.position + dir_master * length,
                        fb_start: p,
                        predicted: p + dir_follower * (length * self.gain_estimate),
                        length,
                    };
                    self.current_burst_start = tick;
                    self.bursts_started += 1;
                }
                Phase::Burst {
                    goal,
                    fb_start,
                    predicted,
                    length,
                } => {
                    self.nominal.position =
                        scripted_step(self.spec.speed, dt, &self.nominal.position, &goal);
                    if self.nominal.position == goal {
                        self.phase = Phase::Wait {
                            fb_start,
                            predicted,
                            length,
                            since: tick,
                        };
                    }
                    return;
                }
                Phase::Wait {
                    fb_start,
                    predicted,
                    length,
                    since,
                } => {
                    let Some(fb) = self.latest else { return };
                    let p = fb.follower_pose.position;
                    let on_target = (p - predicted).norm() <= self.spec.wait_tolerance;
                    let responded = (p - fb_start).norm() > self.spec.wait_tolerance;
                    let out_of_patience = tick.saturating_sub(since) >= self.spec.patience_ticks;
                    let done_waiting =
                        self.settled() && (on_target || responded) || out_of_patience;
                    if !done_waiting {
                        return;
                    }
                    let observed = (p - fb_start).norm() / length;
                    if observed > 1e-6 {
                        self.gain_estimate = observed;
                    }
                    self.bursts.push(BurstRecord {
                        start_tick: self.current_burst_start,
                        end_tick: since,
                        wait_end_tick: tick,
                        length,
                    });
                    self.phase = Phase::Plan;
                    return;
                }
                Phase::Confirm => {
                    if self.waypoint_confirmed() {
                        self.advance_waypoint();
                        if self.phase == Phase::Done {
                            return;
                        }
                        continue;
                    }
                    let Some(fb) = self.latest else { return };
                    let off = (fb.follower_pose.position - self.task.waypoint(self.waypoint)).norm();
                    if off > self.task.tolerance && self.settled() {
                        self.phase = Phase::Plan;
                        continue;
                    }
                    return;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelConfig, SimChannel};
    use crate::controller::{ControllerOptions, MasterController, Telecommand};
    use crate::follower::{FollowerState, TaskStatus, TaskTracker};
    use nalgebra::UnitQuaternion;

    #[test]
    fn scripted_at_goal_stays() {
        let g = Vector3::new(0.1, 0.2, 0.3);
        assert_eq!(scripted_step(0.05, 0.001, &g, &g), g);
    }

    #[test]
    fn scripted_tick_count() {
        // 0.2 m / (0.05 m/s * 1 ms) = 4000 ticks.
        let goal = Vector3::new(0.2, 0.0, 0.0);
        let mut p = Vector3::zeros();
        let mut ticks = 0;
        while p != goal {
            p = scripted_step(0.05, 0.001, &p, &goal);
            ticks += 1;
            assert!(ticks <= 4001);
        }
        assert_eq!(ticks, 4000);
    }

    #[test]
    fn master_waypoint_divides_by_gamma() {
        let task = ReachTask::new("t", Vector3::zeros(), vec![Vector3::new(0.06, 0.0, 0.0)]).unwrap();
        let align = FrameAlignment::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.7)).unwrap();
        let op = Operator::new(OperatorSpec::scripted(0.05), task, Pose::identity(), align, ScalingConfig::NORMAL, 1000.0).unwrap();
        let m = op.master_waypoint(0);
        assert!((m.norm() - 0.2).abs() < 1e-12);
        assert!((align.rotation * m * 0.30 - Vector3::new(0.06, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn tremor_zero_amplitude_is_identity() {
        let spec = OperatorSpec::scripted(0.05);
        let pose = Pose::from_position(Vector3::new(0.1, 0.2, 0.3));
        for t in 0..100 {
            assert_eq!(add_tremor(&pose, &spec, t, 1000.0), pose);
        }
    }

    #[test]
    fn tremor_bounded_and_deterministic() {
        let mut spec = OperatorSpec::scripted(0.05);
        spec.tremor_amplitude = 1e-3;
        spec.seed = 99;
        let a = Tremor::from_spec(&spec);
        let b = Tremor::from_spec(&spec);
        let bound = 1e-3 * a.component_count() as f64;
        for t in 0..5000 {
            let o = a.offset(t, 1000.0);
            assert!(o.norm() <= bound + 1e-15);
            assert_eq!(o, b.offset(t, 1000.0));
        }
        spec.seed = 100;
        assert_ne!(Tremor::from_spec(&spec).offset(17, 1000.0), a.offset(17, 1000.0));
    }

    #[test]
    fn invalid_specs() {
        assert!(OperatorSpec::scripted(0.0).validate().is_err());
        let mut s = OperatorSpec::scripted(0.1);
        s.tremor_amplitude = -1.0;
        assert!(s.validate().is_err());
        assert!(OperatorSpec::move_and_wait(0.1, 0.0).validate().is_err());
        let task = ReachTask::new("t", Vector3::zeros(), vec![Vector3::x()]).unwrap();
        assert!(Operator::new(OperatorSpec::scripted(0.1), task, Pose::identity(), FrameAlignment::identity(), ScalingConfig { gamma_c: 0.0, gamma_v: 0.0 }, 1000.0).is_err());
    }

    /// Minimal closed loop: operator -> controller -> channel -> follower -> channel.
    fn run_loop(spec: OperatorSpec, task: ReachTask, scaling: ScalingConfig, delay: u64, budget: u64) -> (Option<u64>, Operator) {
        let mut op = Operator::new(spec, task.clone(), Pose::identity(), FrameAlignment::identity(), scaling, 1000.0).unwrap();
        let mut ctl = MasterController::new(scaling, FrameAlignment::identity(), ControllerOptions::default()).unwrap();
        let mut cmd_ch: SimChannel<Telecommand> = SimChannel::new(ChannelConfig::fixed(delay)).unwrap();
        let mut fb_ch: SimChannel<FeedbackMsg> = SimChannel::new(ChannelConfig::fixed(delay)).unwrap();
        let mut follower = FollowerState::new(Pose::from_position(task.start()), FrameAlignment::identity());
        let mut tracker = TaskTracker::new(task);
        for tick in 0..budget {
            let pose = op.step(tick).unwrap();
            let cmd = ctl.step(pose, tick, false, 0.0).unwrap();
            cmd_ch.send(cmd, tick).unwrap();
            for c in cmd_ch.poll(tick) {
                follower.apply_telecommand(&c).unwrap();
            }
            follower.regulate(0.001);
            if let TaskStatus::Completed { tick } = tracker.update(&follower.actual_pose.position, tick) {
                return (Some(tick), op);
            }
            fb_ch.send(FeedbackMsg { seq: tick, send_tick: tick, follower_pose: follower.actual_pose, frame_id: tick }, tick).unwrap();
            op.observe_feedback(fb_ch.poll(tick), tick);
        }
        (None, op)
    }

    fn reach(d: f64) -> ReachTask {
        ReachTask::new("reach", Vector3::zeros(), vec![Vector3::new(d, 0.0, 0.0)]).unwrap()
    }

    #[test]
    fn move_and_wait_zero_delay_completes() {
        let (done, op) = run_loop(OperatorSpec::move_and_wait(0.1, 0.02), reach(0.03), ScalingConfig::NORMAL, 0, 200_000);
        assert!(done.is_some());
        // Waits end shortly after the servo settles.
        for b in op.bursts() {
            assert!(b.wait_end_tick - b.end_tick < 100, "{b:?}");
        }
    }

    #[test]
    fn move_and_wait_delay_waits_round_trip() {
        let (done0, _) = run_loop(OperatorSpec::move_and_wait(0.1, 0.02), reach(0.03), ScalingConfig::NORMAL, 0, 200_000);
        let (done, op) = run_loop(OperatorSpec::move_and_wait(0.1, 0.02), reach(0.03), ScalingConfig::NORMAL, 250, 200_000);
        assert!(done.unwrap() > done0.unwrap());
        assert!(!op.bursts().is_empty());
        for b in op.bursts() {
            assert!(b.wait_end_tick - b.end_tick >= 500 - (b.end_tick - b.start_tick).min(500), "{b:?}");
            assert!(b.wait_end_tick - b.start_tick >= 500, "{b:?}");
        }
    }

    #[test]
    fn long_burst_single_shot_at_unit_gain() {
        let scaling = ScalingConfig::new(1.0, 0.0).unwrap();
        let (done, op) = run_loop(OperatorSpec::move_and_wait(0.1, 0.5), reach(0.04), scaling, 100, 100_000);
        assert!(done.is_some());
        assert_eq!(op.bursts_started(), 1);
    }

    #[test]
    fn scripted_multi_waypoint_completes() {
        let task = ReachTask::new(
            "multi",
            Vector3::zeros(),
            vec![Vector3::new(0.01, 0.0, 0.0), Vector3::new(0.01, 0.01, 0.0)],
        )
        .unwrap();
        let (done, _) = run_loop(OperatorSpec::scripted(0.05), task, ScalingConfig::NORMAL, 50, 100_000);
        assert!(done.is_some());
    }

    #[test]
    fn scripted_velocity_scaling_reaches_goal() {
        let (done, _) = run_loop(OperatorSpec::scripted(0.05), reach(0.03), ScalingConfig::VELOCITY, 50, 100_000);
        assert!(done.is_some());
    }

    #[test]
    fn starvation_flags() {
        let mut spec = OperatorSpec::move_and_wait(0.1, 0.02);
        spec.feedback_timeout_ticks = 10;
        let mut op = Operator::new(spec, reach(0.03), Pose::identity(), FrameAlignment::identity(), ScalingConfig::NORMAL, 1000.0).unwrap();
        for t in 0..=10 {
            op.step(t).unwrap();
        }
        assert!(matches!(op.step(11), Err(OperatorError::FeedbackStarved { tick: 11, .. })));
    }
}
