//! Safe system identification with extreme learning machines.
//!
//! A single-hidden-layer network with fixed random input weights models a
//! discrete-time stochastic system. Its output weights are learned by a convex
//! quadratically constrained program whose constraints make a barrier
//! ellipse and a quadratic Lyapunov function hold with a prescribed
//! probability at a grid of sample states.

pub mod constraints;
pub mod dataset;
pub mod elm;
pub mod error;
pub mod linalg;
pub mod qcqp;
pub mod robot;
pub mod rollout;
pub mod sampler;

pub use error::{Error, Result};
