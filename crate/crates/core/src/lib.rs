//! Point-defect lattice statics with a reference EAM potential and a linear
//! invariant surrogate fitted on small periodic training cells.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration and
//! the command-line driver live in the `mlipgen` crate.

#![no_std]
// `!(x > 0.0)` rejects NaN as well; index loops mirror the matrix formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod equilibrate;
mod error;
pub mod fit;
pub mod lattice;
pub mod linalg;
pub mod math;
pub mod potential;
pub mod surrogate;
pub mod training;

pub use error::{Error, Result};
pub use math::Vec2;
