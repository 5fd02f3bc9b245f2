//! Gaussian-process dual model predictive control for an interactive
//! lane merge.
//!
//! The ego vehicle plans with a sparse GP model of the Follower's velocity
//! residual. Because the GP input includes the ego's own predicted states and
//! inputs, the planned input sequence shapes both the predicted mean and the
//! predicted covariance of the Follower, and therefore the tightening of the
//! collision constraints.

pub mod belief;
pub mod cli;
pub mod config;
pub mod solver;
pub mod driver;
pub mod error;
pub mod features;
pub mod gp;
pub mod logs;
pub mod planner;
pub mod selftest;
pub mod sim;
pub mod vehicle;

pub use error::{Error, Result};
