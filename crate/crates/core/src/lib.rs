//! Separated learning and control for finite-horizon linear systems.
//!
//! A known linear *model* and an unknown *plant* run in parallel: the same
//! controls, process disturbances, and sensor draws drive both. Control
//! synthesis is split into an offline part — a parameterized strategy solved
//! on the model, with open slots for plant-trajectory expectations — and an
//! online part that estimates an information state (model belief, plant
//! belief, output statistics) from realized data and binds it into the
//! strategy.
//!
//! Module map:
//!
//! - [`lti`] — system/cost definitions and exact dynamics arithmetic
//! - [`noise`] — the joint Gaussian law of all primitive randomness
//! - [`rng`] — deterministic stream-split random number generation
//! - [`estimator`] — beliefs, Kalman stepping, information-state recursion
//! - [`solver`] — offline strategy synthesis, binding, evaluation
//! - [`sim`] — paired-episode simulation, Monte Carlo, closed-loop learning
//! - [`oracle`] — independent ground-truth computations and the worked
//!   example reproduction

pub mod error;
pub mod estimator;
pub mod linalg;
pub mod lti;
pub mod noise;
pub mod oracle;
pub mod rng;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
