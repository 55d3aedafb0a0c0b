//! Meta-learned mirror-descent adaptive control for manipulator-equation
//! systems, with a planar quadrotor under wind drag as the benchmark plant.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`]: reverse-mode tape used to differentiate through rollouts.
//! * [`scalar`]: numeric abstraction shared by `f64` and tape code paths.
//! * [`potential`]: l_p Bregman potential (value, gradient, Hessian,
//!   divergence) with optional quadratic smoothing.
//! * [`dynamics`]: manipulator-equation plants and the quadrotor benchmark.
//! * [`reference`]: reference trajectories (loops and random splines).
//! * [`features`]: MLP feature map for the learned basis Y-hat.
//! * [`controller`]: sliding-variable controller and the mirror-descent
//!   adaptation law.
//! * [`simulate`]: closed-loop RK4 integration, generic over the scalar.
//! * [`optim`]: adaptive-moment gradient steps shared by both training loops.
//! * [`ensemble`]: surrogate-ensemble fitting from PID-collected data.
//! * [`metatrain`]: bi-level meta-training of features, potential exponent
//!   and gains.
//! * [`verify`]: Lyapunov and ultimate-bound certificates.
//! * [`pipeline`]: configuration, persistence, reports and the CLI driver.

pub mod autodiff;
pub mod controller;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod metatrain;
pub mod optim;
pub mod pipeline;
pub mod potential;
pub mod reference;
pub mod rng;
pub mod scalar;
pub mod simulate;
pub mod verify;

pub use error::{Error, Result};
