//! Serial-chain forward kinematics and the position Jacobian.
//!
//! Chains are described by Denavit-Hartenberg rows. Two conventions are
//! understood and every chain file must name its convention in the header:
//!
//! * `modified` (Craig): joint `i` contributes
//!   `RotX(alpha) * TransX(a) * RotZ(theta) * TransZ(d)`, so `a`/`alpha`
//!   describe the link *preceding* the joint axis.
//! * `standard`: joint `i` contributes
//!   `RotZ(theta) * TransZ(d) * TransX(a) * RotX(alpha)`, so `a`/`alpha`
//!   describe the link *following* the joint axis.
//!
//! For a revolute joint `theta = q + theta_offset`; for a prismatic joint
//! `d = q + d_offset` and `theta = theta_offset`. An optional fixed tool
//! translation is applied after the last joint.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DVector, Isometry3, Matrix3xX, Translation3, UnitQuaternion, Vector3};
use thiserror::Error;

/// Tolerance used when validating rotation operators.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("dimension mismatch: chain has {expected} joints, got {got} {what}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("chain must have at least one joint")]
    EmptyChain,
    #[error("quaternion is not unit norm (norm = {0})")]
    NotUnit(f64),
    #[error("chain file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("reading chain file: {0}")]
    Io(String),
}

/// Position plus orientation, expressed in some base frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn from_position(position: Vector3<f64>) -> Self {
        Self {
            position,
            orientation: UnitQuaternion::identity(),
        }
    }

    /// Builds a pose from raw `(w, x, y, z)` quaternion components, rejecting
    /// anything further than [`ROTATION_TOLERANCE`] from unit norm.
    pub fn from_wxyz(position: Vector3<f64>, wxyz: [f64; 4]) -> Result<Self, KinematicsError> {
        Ok(Self {
            position,
            orientation: unit_quaternion_from_wxyz(wxyz)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.orientation.coords.iter().all(|v| v.is_finite())
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self {
            position: iso.translation.vector,
            orientation: iso.rotation,
        }
    }

    /// Quaternion components in `(w, x, y, z)` order.
    pub fn wxyz(&self) -> [f64; 4] {
        quaternion_wxyz(&self.orientation)
    }
}

pub fn quaternion_wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Validates and wraps raw `(w, x, y, z)` components without renormalizing,
/// so that values survive serialization bit-for-bit.
pub fn unit_quaternion_from_wxyz(wxyz: [f64; 4]) -> Result<UnitQuaternion<f64>, KinematicsError> {
    if wxyz.iter().any(|v| !v.is_finite()) {
        return Err(KinematicsError::NonFinite("quaternion"));
    }
    let q = nalgebra::Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
    let norm = q.norm();
    if (norm - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(KinematicsError::NotUnit(norm));
    }
    Ok(UnitQuaternion::new_unchecked(q))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointType {
    Revolute,
    Prismatic,
}

impl fmt::Display for JointType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JointType::Revolute => write!(f, "revolute"),
            JointType::Prismatic => write!(f, "prismatic"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DhConvention {
    Modified,
    Standard,
}

impl FromStr for DhConvention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "modified" => Ok(DhConvention::Modified),
            "standard" => Ok(DhConvention::Standard),
            other => Err(format!("unknown dh-convention `{other}`")),
        }
    }
}

impl fmt::Display for DhConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DhConvention::Modified => write!(f, "modified"),
            DhConvention::Standard => write!(f, "standard"),
        }
    }
}

/// One DH row. Lengths in meters, angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DhJoint {
    pub kind: JointType,
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
}

impl DhJoint {
    pub fn revolute(a: f64, alpha: f64, d: f64, theta_offset: f64) -> Self {
        Self {
            kind: JointType::Revolute,
            a,
            alpha,
            d,
            theta_offset,
        }
    }

    pub fn prismatic(a: f64, alpha: f64, d: f64, theta_offset: f64) -> Self {
        Self {
            kind: JointType::Prismatic,
            a,
            alpha,
            d,
            theta_offset,
        }
    }

    fn is_finite(&self) -> bool {
        self.a.is_finite()
            && self.alpha.is_finite()
            && self.d.is_finite()
            && self.theta_offset.is_finite()
    }

    /// Joint angle and offset along the joint axis for joint value `q`.
    fn variables(&self, q: f64) -> (f64, f64) {
        match self.kind {
            JointType::Revolute => (q + self.theta_offset, self.d),
            JointType::Prismatic => (self.theta_offset, q + self.d),
        }
    }
}

fn rot_x(angle: f64) -> Isometry3<f64> {
    Isometry3::rotation(Vector3::x() * angle)
}

fn rot_z(angle: f64) -> Isometry3<f64> {
    Isometry3::rotation(Vector3::z() * angle)
}

fn trans(x: f64, y: f64, z: f64) -> Isometry3<f64> {
    Isometry3::translation(x, y, z)
}

/// A serial chain of DH joints mounted at `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    joints: Vec<DhJoint>,
    convention: DhConvention,
    base: Pose,
    tool: Vector3<f64>,
}

impl KinematicChain {
    pub fn new(convention: DhConvention, joints: Vec<DhJoint>) -> Result<Self, KinematicsError> {
        if joints.is_empty() {
            return Err(KinematicsError::EmptyChain);
        }
        if joints.iter().any(|j| !j.is_finite()) {
            return Err(KinematicsError::NonFinite("joint descriptor"));
        }
        Ok(Self {
            joints,
            convention,
            base: Pose::identity(),
            tool: Vector3::zeros(),
        })
    }

    pub fn with_base(mut self, base: Pose) -> Result<Self, KinematicsError> {
        if !base.is_finite() {
            return Err(KinematicsError::NonFinite("base frame"));
        }
        self.base = base;
        Ok(self)
    }

    pub fn with_tool(mut self, tool: Vector3<f64>) -> Result<Self, KinematicsError> {
        if tool.iter().any(|v| !v.is_finite()) {
            return Err(KinematicsError::NonFinite("tool offset"));
        }
        self.tool = tool;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[DhJoint] {
        &self.joints
    }

    pub fn convention(&self) -> DhConvention {
        self.convention
    }

    pub fn base(&self) -> &Pose {
        &self.base
    }

    pub fn tool(&self) -> &Vector3<f64> {
        &self.tool
    }

    fn check_len(&self, what: &'static str, got: usize) -> Result<(), KinematicsError> {
        if got != self.n() {
            return Err(KinematicsError::DimensionMismatch {
                what,
                expected: self.n(),
                got,
            });
        }
        Ok(())
    }

    /// Walks the chain, returning the frame of every joint axis (the frame
    /// whose z axis the joint rotates about / slides along) and the final
    /// end-effector frame.
    fn frames(&self, angles: &[f64]) -> (Vec<Isometry3<f64>>, Isometry3<f64>) {
        let mut current = self.base.to_isometry();
        let mut axes = Vec::with_capacity(self.n());
        for (joint, &q) in self.joints.iter().zip(angles) {
            let (theta, d) = joint.variables(q);
            match self.convention {
                DhConvention::Modified => {
                    current = current * rot_x(joint.alpha) * trans(joint.a, 0.0, 0.0);
                    axes.push(current);
                    current = current * rot_z(theta) * trans(0.0, 0.0, d);
                }
                DhConvention::Standard => {
                    axes.push(current);
                    current =
                        current * rot_z(theta) * trans(0.0, 0.0, d) * trans(joint.a, 0.0, 0.0)
                            * rot_x(joint.alpha);
                }
            }
        }
        current = current * trans(self.tool.x, self.tool.y, self.tool.z);
        (axes, current)
    }

    /// The built-in 7-joint arm used as a stand-in master manipulator:
    /// a shoulder/elbow/forearm chain with a 3-axis wrist gimbal, modified DH.
    pub fn bundled_master() -> Self {
        use std::f64::consts::FRAC_PI_2;
        let joints = vec![
            DhJoint::revolute(0.0, 0.0, 0.0, FRAC_PI_2),
            DhJoint::revolute(0.0, -FRAC_PI_2, 0.0, -FRAC_PI_2),
            DhJoint::revolute(0.279, 0.0, 0.0, FRAC_PI_2),
            DhJoint::revolute(0.365, -FRAC_PI_2, 0.151, 0.0),
            DhJoint::revolute(0.0, FRAC_PI_2, 0.0, 0.0),
            DhJoint::revolute(0.0, -FRAC_PI_2, 0.0, -FRAC_PI_2),
            DhJoint::revolute(0.0, -FRAC_PI_2, 0.0, FRAC_PI_2),
        ];
        KinematicChain::new(DhConvention::Modified, joints)
            .and_then(|c| c.with_tool(Vector3::new(0.0, 0.0, 0.039)))
            .expect("bundled chain is valid")
    }

    pub fn parse(text: &str) -> Result<Self, KinematicsError> {
        let mut convention = None;
        let mut joints = Vec::new();
        let mut tool = Vector3::zeros();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| KinematicsError::Parse { line: line_no, msg };
            if let Some(rest) = line.strip_prefix("dh-convention:") {
                if convention.is_some() {
                    return Err(err("duplicate dh-convention header".into()));
                }
                convention = Some(rest.trim().parse::<DhConvention>().map_err(err)?);
                continue;
            }
            if convention.is_none() {
                return Err(err("missing `dh-convention:` header before joint rows".into()));
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let nums = |items: &[&str]| -> Result<Vec<f64>, KinematicsError> {
                items
                    .iter()
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|e| err(format!("bad number `{s}`: {e}")))
                            .and_then(|v| {
                                if v.is_finite() {
                                    Ok(v)
                                } else {
                                    Err(err(format!("non-finite value `{s}`")))
                                }
                            })
                    })
                    .collect()
            };
            match fields[0] {
                "revolute" | "prismatic" => {
                    if fields.len() != 5 {
                        return Err(err(format!(
                            "expected `type a alpha d theta_offset`, got {} fields",
                            fields.len()
                        )));
                    }
                    let v = nums(&fields[1..])?;
                    let kind = if fields[0] == "revolute" {
                        JointType::Revolute
                    } else {
                        JointType::Prismatic
                    };
                    joints.push(DhJoint {
                        kind,
                        a: v[0],
                        alpha: v[1],
                        d: v[2],
                        theta_offset: v[3],
                    });
                }
                "tool" => {
                    if fields.len() != 4 {
                        return Err(err("expected `tool x y z`".into()));
                    }
                    let v = nums(&fields[1..])?;
                    tool = Vector3::new(v[0], v[1], v[2]);
                }
                other => return Err(err(format!("unknown joint type `{other}`"))),
            }
        }
        let convention = convention.ok_or(KinematicsError::Parse {
            line: 0,
            msg: "missing `dh-convention:` header".into(),
        })?;
        KinematicChain::new(convention, joints)?.with_tool(tool)
    }

    pub fn load(path: &Path) -> Result<Self, KinematicsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KinematicsError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Renders the chain in the line-oriented file format.
    pub fn to_file_string(&self) -> String {
        let mut out = format!(
            "# type a alpha d theta_offset (meters, radians)\ndh-convention: {}\n",
            self.convention
        );
        for j in &self.joints {
            out.push_str(&format!(
                "{} {:?} {:?} {:?} {:?}\n",
                j.kind, j.a, j.alpha, j.d, j.theta_offset
            ));
        }
        if self.tool != Vector3::zeros() {
            out.push_str(&format!(
                "tool {:?} {:?} {:?}\n",
                self.tool.x, self.tool.y, self.tool.z
            ));
        }
        out
    }
}

/// Joint readings at one tick: angles (rad, or m for prismatic) and rates.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub angles: Vec<f64>,
    pub velocities: Vec<f64>,
    pub tick: u64,
}

impl JointState {
    pub fn new(angles: Vec<f64>, velocities: Vec<f64>, tick: u64) -> Self {
        Self {
            angles,
            velocities,
            tick,
        }
    }

    /// Positions only; velocities zeroed.
    pub fn at(angles: Vec<f64>) -> Self {
        let n = angles.len();
        Self {
            angles,
            velocities: vec![0.0; n],
            tick: 0,
        }
    }
}

fn check_angles(chain: &KinematicChain, joints: &JointState) -> Result<(), KinematicsError> {
    chain.check_len("angles", joints.angles.len())?;
    if joints.angles.iter().any(|v| !v.is_finite()) {
        return Err(KinematicsError::NonFinite("joint angles"));
    }
    Ok(())
}

pub fn forward_kinematics(
    chain: &KinematicChain,
    joints: &JointState,
) -> Result<Pose, KinematicsError> {
    check_angles(chain, joints)?;
    let (_, ee) = chain.frames(&joints.angles);
    Ok(Pose::from_isometry(&ee))
}

/// Geometric position Jacobian (3 x n): column `i` is the end-effector
/// linear velocity produced by a unit rate on joint `i`.
pub fn position_jacobian(
    chain: &KinematicChain,
    joints: &JointState,
) -> Result<Matrix3xX<f64>, KinematicsError> {
    check_angles(chain, joints)?;
    let (axes, ee) = chain.frames(&joints.angles);
    let p_ee = ee.translation.vector;
    let mut jac = Matrix3xX::zeros(chain.n());
    for (i, (frame, joint)) in axes.iter().zip(chain.joints()).enumerate() {
        let axis = frame.rotation * Vector3::z();
        let column = match joint.kind {
            JointType::Revolute => axis.cross(&(p_ee - frame.translation.vector)),
            JointType::Prismatic => axis,
        };
        jac.set_column(i, &column);
    }
    Ok(jac)
}

/// End-effector linear velocity `J(q) * qdot`.
pub fn linear_velocity(
    chain: &KinematicChain,
    joints: &JointState,
) -> Result<Vector3<f64>, KinematicsError> {
    chain.check_len("velocities", joints.velocities.len())?;
    if joints.velocities.iter().any(|v| !v.is_finite()) {
        return Err(KinematicsError::NonFinite("joint velocities"));
    }
    let jac = position_jacobian(chain, joints)?;
    Ok(jac * DVector::from_column_slice(&joints.velocities))
}
