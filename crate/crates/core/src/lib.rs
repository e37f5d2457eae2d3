//! Exact event-driven simulation of a spatial social-network model on a flat
//! torus, together with a deterministic solver for its mean-field limit and
//! the diagnostics that tie the two together.
//!
//! Vertices live at positions on the torus. Three mechanisms drive the
//! dynamics:
//!
//! * **invitation**: each vertex recruits at rate `alpha` a newcomer placed at
//!   its own position plus a Gaussian offset;
//! * **affinity**: a newcomer appears at `y` at rate
//!   `sum_i aff(x_i, y) k_af(y)` with a triangular local affinity `aff`;
//! * **withdrawal**: each vertex leaves at rate `beta`.
//!
//! The simulator ([`simulator`]) samples this process exactly with a single
//! global exponential clock plus thinning. [`meanfield`] integrates the
//! deterministic integro-differential limit on a periodic grid, and
//! [`observables`] provides the generator, quadratic-variation and histogram
//! machinery used to check the simulator against the limit.

pub mod domain;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod meanfield;
pub mod observables;
pub mod parallel;
pub mod quadrature;
pub mod rng;
pub mod simulator;
pub mod state;

pub use domain::{Geometry, Params, Position};
pub use error::{Error, Result};
pub use kernels::Model;
pub use simulator::{EventKind, EventRecord, RunConfig, Simulator, Trajectory};
pub use state::SystemState;
