//! Entropic cost equilibria (ECE) for multi-agent dynamic games.
//!
//! * [`lq`] solves linear-quadratic-Gaussian games exactly with coupled
//!   Riccati recursions.
//! * [`ilq`] approximates equilibria of nonlinear games by iterating LQ
//!   approximations around a nominal trajectory.
//! * [`features`] and [`irl`] learn per-agent cost weights from
//!   demonstrations by matching feature expectations.
//! * [`eval`] holds the experiment metrics and [`io`] the file formats.

pub mod dynamics;
pub mod eval;
pub mod error;
pub mod features;
pub mod game;
pub mod ilq;
pub mod io;
pub mod irl;
pub mod linalg;
pub mod lq;

pub use error::{Error, Result};
