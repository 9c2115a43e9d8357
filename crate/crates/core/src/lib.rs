//! Poisson–Nernst–Planck drift–diffusion on a square with a circular hole.
//!
//! Q1 finite elements on a level-set ghost-node grid, primitive and
//! quasi-neutral formulations, and IMEX Runge–Kutta plus split time stepping.

pub mod analysis;
pub mod error;
pub mod fem;
pub mod geometry;
pub mod linalg;
pub mod model;
pub mod time;

pub use error::{Error, Result};
