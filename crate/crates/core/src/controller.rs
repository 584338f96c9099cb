//! Master-side telecommand generation: relative position deltas rotated into
//! the follower frame and multiplied by a (possibly speed-dependent) scaling
//! factor, absolute orientation passed through one-to-one, and clutching.

use std::collections::VecDeque;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    self, forward_kinematics, JointState, KinematicChain, KinematicsError, Pose,
    ROTATION_TOLERANCE,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("invalid scaling config: {0}")]
    InvalidScaling(String),
    #[error("master speed must be finite and non-negative, got {0}")]
    InvalidSpeed(f64),
    #[error("frame alignment is not a proper rotation (quaternion norm {0})")]
    InvalidAlignment(f64),
    #[error("non-finite master pose at tick {tick}")]
    NonFinitePose { tick: u64 },
    #[error("controller is faulted; no further telecommands")]
    Faulted,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// Constant gain `gamma_c` (unitless) and velocity gain `gamma_v` (s/m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub gamma_c: f64,
    pub gamma_v: f64,
}

impl ScalingConfig {
    pub const NORMAL: ScalingConfig = ScalingConfig {
        gamma_c: 0.30,
        gamma_v: 0.0,
    };
    pub const REDUCED: ScalingConfig = ScalingConfig {
        gamma_c: 0.15,
        gamma_v: 0.0,
    };
    pub const VELOCITY: ScalingConfig = ScalingConfig {
        gamma_c: 0.15,
        gamma_v: 0.1,
    };

    pub fn new(gamma_c: f64, gamma_v: f64) -> Result<Self, ControllerError> {
        let cfg = Self { gamma_c, gamma_v };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(self.gamma_c.is_finite() && self.gamma_c >= 0.0) {
            return Err(ControllerError::InvalidScaling(format!(
                "gamma_c must be finite and >= 0, got {}",
                self.gamma_c
            )));
        }
        if !(self.gamma_v.is_finite() && self.gamma_v >= 0.0) {
            return Err(ControllerError::InvalidScaling(format!(
                "gamma_v must be finite and >= 0, got {}",
                self.gamma_v
            )));
        }
        Ok(())
    }

    /// `gamma_c + gamma_v * speed`.
    pub fn effective_gamma(&self, master_speed: f64) -> Result<f64, ControllerError> {
        if !(master_speed.is_finite() && master_speed >= 0.0) {
            return Err(ControllerError::InvalidSpeed(master_speed));
        }
        Ok(self.gamma_c + self.gamma_v * master_speed)
    }

    pub fn label(&self) -> String {
        format!("gc={:.2},gv={:.1}", self.gamma_c, self.gamma_v)
    }
}

/// Fixed rotation taking master-base coordinates into follower-base coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameAlignment {
    pub rotation: UnitQuaternion<f64>,
}

impl Default for FrameAlignment {
    fn default() -> Self {
        Self::identity()
    }
}

impl FrameAlignment {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>) -> Result<Self, ControllerError> {
        let norm = rotation.quaternion().norm();
        if !norm.is_finite() || (norm - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(ControllerError::InvalidAlignment(norm));
        }
        Ok(Self { rotation })
    }

    pub fn from_wxyz(wxyz: [f64; 4]) -> Result<Self, ControllerError> {
        let q = kinematics::unit_quaternion_from_wxyz(wxyz).map_err(|_| {
            let n = wxyz.iter().map(|v| v * v).sum::<f64>().sqrt();
            ControllerError::InvalidAlignment(n)
        })?;
        Self::new(q)
    }
}

/// One per-tick message from master to follower.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Telecommand {
    pub seq: u64,
    pub send_tick: u64,
    /// Already rotated into the follower frame and scaled.
    pub delta_p_scaled: Vector3<f64>,
    /// Raw master orientation; alignment is applied follower-side.
    pub orientation: UnitQuaternion<f64>,
    pub gripper: f64,
    pub clutched: bool,
}

/// Exponentially smoothed first-difference velocity estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedVelocity {
    alpha: f64,
    tick_hz: f64,
    last: Option<Vector3<f64>>,
    filtered: Vector3<f64>,
}

impl SmoothedVelocity {
    pub const DEFAULT_ALPHA: f64 = 0.2;

    pub fn new(alpha: f64, tick_hz: f64) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0, "smoothing alpha must be in (0, 1]");
        assert!(tick_hz > 0.0, "tick rate must be positive");
        Self {
            alpha,
            tick_hz,
            last: None,
            filtered: Vector3::zeros(),
        }
    }

    pub fn update(&mut self, position: Vector3<f64>) -> Vector3<f64> {
        if let Some(prev) = self.last {
            let raw = (position - prev) * self.tick_hz;
            self.filtered += (raw - self.filtered) * self.alpha;
        }
        self.last = Some(position);
        self.filtered
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.filtered
    }
}

/// Speed from a window of recent positions sampled at `tick_hz`, via the
/// smoothed first-difference filter. Fewer than two samples gives 0.
pub fn estimate_speed_smoothed(positions: &[Vector3<f64>], tick_hz: f64, alpha: f64) -> f64 {
    if positions.len() < 2 {
        return 0.0;
    }
    let mut est = SmoothedVelocity::new(alpha, tick_hz);
    for p in positions {
        est.update(*p);
    }
    est.velocity().norm()
}

/// Speed from measured joint rates via `J * qdot`.
pub fn estimate_speed_jacobian(
    chain: &KinematicChain,
    joints: &JointState,
) -> Result<f64, ControllerError> {
    Ok(kinematics::linear_velocity(chain, joints)?.norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpeedEstimator {
    /// Joint-rate route; requires joint states (see [`MasterController::step_joints`]).
    Jacobian,
    #[default]
    Smoothed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MasterState {
    pub prev_pose: Option<Pose>,
    pub velocity_estimate: Vector3<f64>,
    pub clutch_engaged: bool,
    /// Set by a clutch release; the next step re-anchors the relative reference.
    pub reanchor: bool,
    pub next_seq: u64,
    pub faulted: bool,
    /// Orientation last sent while unclutched.
    pub held_orientation: UnitQuaternion<f64>,
}

impl Default for MasterState {
    fn default() -> Self {
        Self {
            prev_pose: None,
            velocity_estimate: Vector3::zeros(),
            clutch_engaged: false,
            reanchor: false,
            next_seq: 0,
            faulted: false,
            held_orientation: UnitQuaternion::identity(),
        }
    }
}

impl MasterState {
    pub fn engage_clutch(mut self) -> Self {
        self.clutch_engaged = true;
        self
    }

    pub fn release_clutch(mut self) -> Self {
        if self.clutch_engaged {
            self.clutch_engaged = false;
            self.reanchor = true;
        }
        self
    }
}

/// Options that are testbed decisions rather than part of the control law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerOptions {
    pub tick_hz: f64,
    pub smoothing_alpha: f64,
    /// Whether clutched telecommands keep streaming the live master orientation.
    pub stream_orientation_while_clutched: bool,
}

impl Default for ControllerOptions {
    fn default() -> Self {
        Self {
            tick_hz: 1000.0,
            smoothing_alpha: SmoothedVelocity::DEFAULT_ALPHA,
            stream_orientation_while_clutched: true,
        }
    }
}

/// Single-owner state machine producing one telecommand per step.
#[derive(Debug, Clone)]
pub struct MasterController {
    scaling: ScalingConfig,
    align: FrameAlignment,
    options: ControllerOptions,
    state: MasterState,
    smoother: SmoothedVelocity,
    last_gamma: f64,
}

impl MasterController {
    pub fn new(
        scaling: ScalingConfig,
        align: FrameAlignment,
        options: ControllerOptions,
    ) -> Result<Self, ControllerError> {
        scaling.validate()?;
        Ok(Self {
            scaling,
            align,
            options,
            state: MasterState::default(),
            smoother: SmoothedVelocity::new(options.smoothing_alpha, options.tick_hz),
            last_gamma: scaling.gamma_c,
        })
    }

    pub fn state(&self) -> &MasterState {
        &self.state
    }

    pub fn scaling(&self) -> ScalingConfig {
        self.scaling
    }

    /// Swaps the scaling configuration mid-session; the relative reference is kept.
    pub fn set_scaling(&mut self, scaling: ScalingConfig) -> Result<(), ControllerError> {
        scaling.validate()?;
        self.scaling = scaling;
        Ok(())
    }

    pub fn alignment(&self) -> FrameAlignment {
        self.align
    }

    /// Effective gain used for the most recent telecommand.
    pub fn last_gamma(&self) -> f64 {
        self.last_gamma
    }

    /// Declares where the master is before the first step, so the first
    /// step already yields a displacement from it.
    pub fn anchor(&mut self, pose: Pose) {
        self.state.prev_pose = Some(pose);
        self.smoother.update(pose.position);
    }

    pub fn engage_clutch(&mut self) {
        self.state = std::mem::take(&mut self.state).engage_clutch();
    }

    pub fn release_clutch(&mut self) {
        self.state = std::mem::take(&mut self.state).release_clutch();
    }

    /// Steps with a Cartesian master pose, estimating speed from the
    /// smoothed first difference of positions.
    pub fn step(
        &mut self,
        pose: Pose,
        tick: u64,
        clutch: bool,
        gripper: f64,
    ) -> Result<Telecommand, ControllerError> {
        self.guard(&pose, tick, gripper)?;
        let velocity = self.smoother.update(pose.position);
        self.emit(pose, velocity, tick, clutch, gripper)
    }

    /// Steps from joint readings: pose via forward kinematics, speed via the
    /// Jacobian route.
    pub fn step_joints(
        &mut self,
        chain: &KinematicChain,
        joints: &JointState,
        clutch: bool,
        gripper: f64,
    ) -> Result<Telecommand, ControllerError> {
        if self.state.faulted {
            return Err(ControllerError::Faulted);
        }
        let pose = match forward_kinematics(chain, joints) {
            Ok(p) => p,
            Err(KinematicsError::NonFinite(_)) => {
                self.state.faulted = true;
                return Err(ControllerError::NonFinitePose { tick: joints.tick });
            }
            Err(e) => return Err(e.into()),
        };
        self.guard(&pose, joints.tick, gripper)?;
        let velocity = match kinematics::linear_velocity(chain, joints) {
            Ok(v) => v,
            Err(KinematicsError::NonFinite(_)) => {
                self.state.faulted = true;
                return Err(ControllerError::NonFinitePose { tick: joints.tick });
            }
            Err(e) => return Err(e.into()),
        };
        // Keep the smoothed estimator primed so the two routes can be swapped.
        self.smoother.update(pose.position);
        self.emit(pose, velocity, joints.tick, clutch, gripper)
    }

    fn guard(&mut self, pose: &Pose, tick: u64, gripper: f64) -> Result<(), ControllerError> {
        if self.state.faulted {
            return Err(ControllerError::Faulted);
        }
        if !pose.is_finite() || !gripper.is_finite() {
            self.state.faulted = true;
            return Err(ControllerError::NonFinitePose { tick });
        }
        Ok(())
    }

    fn emit(
        &mut self,
        pose: Pose,
        velocity: Vector3<f64>,
        tick: u64,
        clutch: bool,
        gripper: f64,
    ) -> Result<Telecommand, ControllerError> {
        if clutch {
            self.engage_clutch();
        } else {
            self.release_clutch();
        }
        self.state.velocity_estimate = velocity;
        let gamma = self.scaling.effective_gamma(velocity.norm())?;
        self.last_gamma = gamma;

        let reference = match (self.state.prev_pose, self.state.reanchor) {
            (Some(prev), false) => prev.position,
            _ => pose.position,
        };
        let delta = if self.state.clutch_engaged {
            Vector3::zeros()
        } else {
            self.align.rotation * ((pose.position - reference) * gamma)
        };

        let orientation = if self.state.clutch_engaged
            && !self.options.stream_orientation_while_clutched
        {
            self.state.held_orientation
        } else {
            pose.orientation
        };
        if !self.state.clutch_engaged {
            self.state.held_orientation = pose.orientation;
        }

        let cmd = Telecommand {
            seq: self.state.next_seq,
            send_tick: tick,
            delta_p_scaled: delta,
            orientation,
            gripper,
            clutched: self.state.clutch_engaged,
        };
        self.state.next_seq += 1;
        self.state.prev_pose = Some(pose);
        self.state.reanchor = false;
        Ok(cmd)
    }
}

/// Fixed-length window of recent master positions, for callers that want
/// the batch form of the speed estimate.
#[derive(Debug, Clone)]
pub struct PositionWindow {
    cap: usize,
    buf: VecDeque<Vector3<f64>>,
}

impl PositionWindow {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(2),
            buf: VecDeque::with_capacity(cap),
        }
    }

    pub fn push(&mut self, p: Vector3<f64>) {
        if self.buf.len() == self.cap {
            self.buf.pop_front();
        }
        self.buf.push_back(p);
    }

    pub fn speed(&self, tick_hz: f64, alpha: f64) -> f64 {
        let v: Vec<_> = self.buf.iter().copied().collect();
        estimate_speed_smoothed(&v, tick_hz, alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{DhConvention, DhJoint};
    use approx::assert_abs_diff_eq;
    use nalgebra::Unit;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn controller(scaling: ScalingConfig, align: FrameAlignment) -> MasterController {
        MasterController::new(scaling, align, ControllerOptions::default()).unwrap()
    }

    fn at(x: f64, y: f64, z: f64) -> Pose {
        Pose::from_position(Vector3::new(x, y, z))
    }

    #[test]
    fn anchored_first_step_carries_displacement() {
        let mut c = MasterController::new(ScalingConfig::NORMAL, FrameAlignment::identity(), ControllerOptions::default()).unwrap();
        c.anchor(Pose::identity());
        let cmd = c.step(Pose::from_position(Vector3::new(0.01, 0.0, 0.0)), 0, false, 0.0).unwrap();
        assert!((cmd.delta_p_scaled.x - 0.003).abs() < 1e-15);
    }

    #[test]
    fn effective_gamma_examples() {
        assert_eq!(ScalingConfig::NORMAL.effective_gamma(0.0).unwrap(), 0.30);
        assert_eq!(ScalingConfig::NORMAL.effective_gamma(3.7).unwrap(), 0.30);
        assert_eq!(ScalingConfig::VELOCITY.effective_gamma(0.0).unwrap(), 0.15);
        assert_abs_diff_eq!(ScalingConfig::VELOCITY.effective_gamma(0.2).unwrap(), 0.17, epsilon = 1e-15);
        assert!(ScalingConfig::VELOCITY.effective_gamma(-0.1).is_err());
        assert!(ScalingConfig::VELOCITY.effective_gamma(f64::NAN).is_err());
        assert!(ScalingConfig::new(-0.1, 0.0).is_err());
        assert!(ScalingConfig::new(0.1, f64::INFINITY).is_err());
    }

    #[test]
    fn first_call_emits_zero_delta() {
        let mut c = controller(ScalingConfig::NORMAL, FrameAlignment::identity());
        let cmd = c.step(at(0.4, 0.1, -0.2), 0, false, 0.0).unwrap();
        assert_eq!(cmd.seq, 0);
        assert_eq!(cmd.delta_p_scaled, Vector3::zeros());
    }

    #[test]
    fn constant_scaling_delta() {
        let mut c = controller(ScalingConfig::NORMAL, FrameAlignment::identity());
        c.step(at(0.0, 0.0, 0.0), 0, false, 0.0).unwrap();
        let cmd = c.step(at(0.01, 0.0, 0.0), 1, false, 0.0).unwrap();
        assert_eq!(cmd.seq, 1);
        assert_abs_diff_eq!(cmd.delta_p_scaled, Vector3::new(0.003, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn aligned_delta_matches_quaternion_oracle() {
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        // Oracle: v' = q v q* written out with raw quaternion products.
        let q = rot.quaternion();
        let v = nalgebra::Quaternion::new(0.0, 0.01, 0.0, 0.0);
        let rotated = q * v * q.conjugate();
        let expected = Vector3::new(rotated.i, rotated.j, rotated.k);
        assert_abs_diff_eq!(expected, Vector3::new(0.0, 0.01, 0.0), epsilon = 1e-12);

        let mut c = controller(ScalingConfig::new(1.0, 0.0).unwrap(), FrameAlignment::new(rot).unwrap());
        c.step(at(0.0, 0.0, 0.0), 0, false, 0.0).unwrap();
        let cmd = c.step(at(0.01, 0.0, 0.0), 1, false, 0.0).unwrap();
        assert_abs_diff_eq!(cmd.delta_p_scaled, expected, epsilon = 1e-12);
    }

    #[test]
    fn clutch_then_release_gives_zero_delta() {
        let mut c = controller(ScalingConfig::NORMAL, FrameAlignment::identity());
        c.step(at(0.0, 0.0, 0.0), 0, false, 0.0).unwrap();
        c.engage_clutch();
        let held = c.step(at(0.5, 0.0, 0.0), 1, true, 0.0).unwrap();
        assert!(held.clutched);
        assert_eq!(held.delta_p_scaled, Vector3::zeros());
        c.release_clutch();
        let next = c.step(at(0.5, 0.0, 0.0), 2, false, 0.0).unwrap();
        assert!(!next.clutched);
        assert_eq!(next.delta_p_scaled, Vector3::zeros());
        let moved = c.step(at(0.51, 0.0, 0.0), 3, false, 0.0).unwrap();
        assert_abs_diff_eq!(moved.delta_p_scaled.x, 0.003, epsilon = 1e-12);
    }

    #[test]
    fn release_in_step_moving_master_is_zero() {
        let mut c = controller(ScalingConfig::NORMAL, FrameAlignment::identity());
        c.step(at(0.0, 0.0, 0.0), 0, false, 0.0).unwrap();
        c.step(at(0.2, 0.0, 0.0), 1, true, 0.0).unwrap();
        c.step(at(0.4, 0.0, 0.0), 2, true, 0.0).unwrap();
        // Released on a tick where the master has also moved.
        let first = c.step(at(0.45, 0.0, 0.0), 3, false, 0.0).unwrap();
        assert_eq!(first.delta_p_scaled, Vector3::zeros());
    }

    #[test]
    fn engage_is_idempotent() {
        let once = MasterState::default().engage_clutch();
        let twice = MasterState::default().engage_clutch().engage_clutch();
        assert_eq!(once, twice);
        let r1 = once.clone().release_clutch();
        let r2 = once.release_clutch().release_clutch();
        assert_eq!(r1, r2);
    }

    #[test]
    fn clutched_step_streams_orientation() {
        let mut c = controller(ScalingConfig::NORMAL, FrameAlignment::identity());
        c.step(at(0.0, 0.0, 0.0), 0, false, 0.0).unwrap();
        let q = UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3);
        let cmd = c.step(Pose::new(Vector3::new(0.1, 0.0, 0.0), q), 1, true, 0.0).unwrap();
        assert!(cmd.clutched);
        assert_eq!(cmd.delta_p_scaled, Vector3::zeros());
        assert_eq!(cmd.orientation, q);
    }

    #[test]
    fn clutched_orientation_can_be_held() {
        let opts = ControllerOptions {
            stream_orientation_while_clutched: false,
            ..Default::default()
        };
        let mut c = MasterController::new(ScalingConfig::NORMAL, FrameAlignment::identity(), opts).unwrap();
        let q0 = UnitQuaternion::from_euler_angles(0.0, 0.0, 0.5);
        c.step(Pose::new(Vector3::zeros(), q0), 0, false, 0.0).unwrap();
        let q1 = UnitQuaternion::from_euler_angles(0.4, 0.0, 0.0);
        let cmd = c.step(Pose::new(Vector3::zeros(), q1), 1, true, 0.0).unwrap();
        assert_eq!(cmd.orientation, q0);
    }

    #[test]
    fn non_finite_pose_faults() {
        let mut c = controller(ScalingConfig::NORMAL, FrameAlignment::identity());
        c.step(at(0.0, 0.0, 0.0), 0, false, 0.0).unwrap();
        let err = c.step(at(f64::NAN, 0.0, 0.0), 1, false, 0.0).unwrap_err();
        assert_eq!(err, ControllerError::NonFinitePose { tick: 1 });
        assert!(c.state().faulted);
        assert_eq!(c.state().next_seq, 1);
        assert_eq!(c.step(at(0.0, 0.0, 0.0), 2, false, 0.0).unwrap_err(), ControllerError::Faulted);
    }

    #[test]
    fn gripper_passes_through() {
        let mut c = controller(ScalingConfig::NORMAL, FrameAlignment::identity());
        let cmd = c.step(at(0.0, 0.0, 0.0), 0, false, 0.7).unwrap();
        assert_eq!(cmd.gripper, 0.7);
    }

    #[test]
    fn stationary_speed_is_zero() {
        let pts = vec![Vector3::new(0.1, 0.2, 0.3); 50];
        assert_eq!(estimate_speed_smoothed(&pts, 1000.0, 0.2), 0.0);
        assert_eq!(estimate_speed_smoothed(&pts[..1], 1000.0, 0.2), 0.0);
        assert_eq!(estimate_speed_smoothed(&[], 1000.0, 0.2), 0.0);
    }

    #[test]
    fn smoothed_speed_steady_state() {
        // Zero-initialized EMA of a constant raw velocity v after k updates is
        // v * (1 - (1 - alpha)^k); with k = 199 the residual is ~1e-21 m/s.
        let v = 0.05;
        let pts: Vec<_> = (0..200).map(|i| Vector3::new(v * i as f64 / 1000.0, 0.0, 0.0)).collect();
        let k = (pts.len() - 1) as i32;
        let closed_form = v * (1.0 - 0.8f64.powi(k));
        let est = estimate_speed_smoothed(&pts, 1000.0, 0.2);
        assert!((est - closed_form).abs() < 1e-9);
        assert!((est - v).abs() < 1e-6);
    }

    #[test]
    fn jacobian_speed_route() {
        let chain = KinematicChain::new(DhConvention::Standard, vec![DhJoint::revolute(1.0, 0.0, 0.0, 0.0)]).unwrap();
        let s = estimate_speed_jacobian(&chain, &JointState::new(vec![0.0], vec![1.0], 0)).unwrap();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn step_joints_uses_jacobian_velocity() {
        let chain = KinematicChain::new(DhConvention::Standard, vec![DhJoint::revolute(1.0, 0.0, 0.0, 0.0)]).unwrap();
        let mut c = controller(ScalingConfig::VELOCITY, FrameAlignment::identity());
        c.step_joints(&chain, &JointState::new(vec![0.0], vec![1.0], 0), false, 0.0).unwrap();
        assert_abs_diff_eq!(c.last_gamma(), 0.25, epsilon = 1e-12);
        assert!(c.step_joints(&chain, &JointState::new(vec![0.0, 1.0], vec![1.0, 0.0], 1), false, 0.0).is_err());
    }

    #[test]
    fn window_speed() {
        let mut w = PositionWindow::new(300);
        for i in 0..400 {
            w.push(Vector3::new(0.0, 0.05 * i as f64 / 1000.0, 0.0));
        }
        assert!((w.speed(1000.0, 0.2) - 0.05).abs() < 1e-6);
    }

    fn walk(seed: u64, n: usize) -> Vec<Vector3<f64>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = Vector3::zeros();
        (0..n)
            .map(|_| {
                p += Vector3::new(
                    rng.random_range(-1e-3..1e-3),
                    rng.random_range(-1e-3..1e-3),
                    rng.random_range(-1e-3..1e-3),
                );
                p
            })
            .collect()
    }

    proptest! {
        #[test]
        fn telescoping_sum(seed in any::<u64>(), gc in 0.0f64..2.0, angle in -3.0f64..3.0) {
            let align = FrameAlignment::new(UnitQuaternion::from_axis_angle(
                &Unit::new_normalize(Vector3::new(1.0, 2.0, 3.0)), angle)).unwrap();
            let mut c = controller(ScalingConfig::new(gc, 0.0).unwrap(), align);
            let path = walk(seed, 200);
            let mut sum = Vector3::zeros();
            for (t, p) in path.iter().enumerate() {
                sum += c.step(Pose::from_position(*p), t as u64, false, 0.0).unwrap().delta_p_scaled;
            }
            let expected = align.rotation * ((path[199] - path[0]) * gc);
            prop_assert!((sum - expected).norm() <= 1e-9);
        }

        #[test]
        fn gamma_lower_bound(gc in 0.0f64..5.0, gv in 0.0f64..5.0, speed in 0.0f64..100.0) {
            let cfg = ScalingConfig::new(gc, gv).unwrap();
            prop_assert!(cfg.effective_gamma(speed).unwrap() >= gc);
        }

        #[test]
        fn orientation_pass_through(seed in any::<u64>(), gc in 0.0f64..1.0, gv in 0.0f64..1.0,
                                    r in proptest::array::uniform3(-3.0f64..3.0)) {
            let mut c = controller(ScalingConfig::new(gc, gv).unwrap(), FrameAlignment::identity());
            let q = UnitQuaternion::from_euler_angles(r[0], r[1], r[2]);
            for (t, p) in walk(seed, 20).iter().enumerate() {
                let cmd = c.step(Pose::new(*p, q), t as u64, t % 3 == 0, 0.0).unwrap();
                let same = cmd.orientation.coords == q.coords || cmd.orientation.coords == -q.coords;
                prop_assert!(same);
            }
        }

        #[test]
        fn doubling_gamma_doubles_deltas(seed in any::<u64>(), gc in 0.01f64..1.0) {
            let mut a = controller(ScalingConfig::new(gc, 0.0).unwrap(), FrameAlignment::identity());
            let mut b = controller(ScalingConfig::new(2.0 * gc, 0.0).unwrap(), FrameAlignment::identity());
            for (t, p) in walk(seed, 50).iter().enumerate() {
                let da = a.step(Pose::from_position(*p), t as u64, false, 0.0).unwrap().delta_p_scaled;
                let db = b.step(Pose::from_position(*p), t as u64, false, 0.0).unwrap().delta_p_scaled;
                prop_assert_eq!(db, da * 2.0);
            }
        }

        #[test]
        fn seq_strictly_increasing(seed in any::<u64>()) {
            let mut c = controller(ScalingConfig::VELOCITY, FrameAlignment::identity());
            let mut last = None;
            for (t, p) in walk(seed, 30).iter().enumerate() {
                let cmd = c.step(Pose::from_position(*p), t as u64, t % 5 == 1, 0.0).unwrap();
                if let Some(prev) = last {
                    prop_assert!(cmd.seq == prev + 1);
                }
                last = Some(cmd.seq);
            }
        }
    }
}
