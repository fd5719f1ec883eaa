//! Microscopic simulator and analysis toolkit for mixed human/robot traffic.
//!
//! The crate models single-lane ring roads and multi-lane bottlenecks with
//! human drivers (IDM plus stochastic noise and empirically distributed
//! acceleration events) and a family of robot-vehicle controllers (BCM,
//! LACC, FollowerStopper, PIwS, a scripted gap-opener, and a learned
//! policy). On top of the simulator sit a car-following trajectory filter,
//! a congestion-stage classifier, an RL environment with shaped rewards,
//! and surrogate safety / efficiency / stability metrics.
//!
//! Everything is deterministic: an episode is a pure function of its
//! configuration and seed.

pub mod config;
pub mod controllers;
pub mod csc;
pub mod error;
pub mod experiment;
pub mod humanizer;
pub mod idm;
pub mod metrics;
pub mod rl;
pub mod rng;
pub mod sim;
pub mod trajectory;

pub use error::{Error, Result};
