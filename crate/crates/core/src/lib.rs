//! Demonstration-to-replay pipeline for a redundant manipulator: rigid-body
//! maths, kinematics and manipulability, first-order task tracking, base
//! placement search, motion-capture filtering, mixture regression of
//! demonstrations, impedance replay simulation and synthetic fixtures.

// validation is written as `!(x > 0.0)` on purpose: NaN must fail it
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod base;
pub mod error;
pub mod gmm;
pub mod io;
pub mod kinematics;
pub mod markers;
pub mod pmp;
pub mod replay;
pub mod se3;
pub mod synth;

pub use error::{Error, Result};
pub use kinematics::{JointState, RobotModel};
pub use markers::DemoTrajectory;
pub use se3::{Pose, Rotation};
