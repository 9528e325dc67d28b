//! Loop-gas representation of the anisotropic Heisenberg lattice model:
//! path-measure integration, cluster expansion of ln Z, geometric
//! expansion coefficients and an exact-diagonalization reference.

// index loops mirror the lattice formulas; `!(x > y)` deliberately rejects NaN
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod lattice;
pub mod loops;
pub mod mc;
pub mod model;
pub mod pathint;
pub mod report;
pub mod rng;
pub mod cli;
pub mod cluster;
pub mod config;
pub mod geometry;
pub mod oracle;

pub use error::{Error, Result};
