//! Numerical weak KAM toolkit on flat tori.
//!
//! The crate evolves continuous initial data with semi-Lagrangian
//! Lax-Oleinik operators, renormalizes away the additive drift, computes
//! finite-time action tables and their long-horizon stabilizations, and
//! compares gradient graphs of evolving and stationary solutions in the
//! Hausdorff metric. A second-order coupled-oscillator application with
//! time-decaying coupling exercises the whole pipeline.
//!
//! Start from the runnable examples (`cargo run --release --example
//! pendulum_weak_kam`, ...), each of which drives one capability end to
//! end; the `weak-kam` binary runs the same experiments from JSON configs.

pub mod barrier;
pub mod error;
pub mod graphs;
pub mod grid;
pub mod kuramoto;
pub mod models;
pub mod runner;
pub mod semigroup;

pub use error::{Error, Result};
pub use grid::{GridTorus, Point, TimePoint, ValueField};
pub use models::{Lagrangian, ModelKind};
pub use semigroup::{RefinementMode, SolverParams};
