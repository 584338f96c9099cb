//! Deterministic testbed for delayed master/follower teleoperation with
//! motion scaling.
pub mod bridge;
pub mod channel;
pub mod controller;
pub mod follower;
pub mod harness;
pub mod kinematics;
pub mod operators;
pub mod telemetry;
