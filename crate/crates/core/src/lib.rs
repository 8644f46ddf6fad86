//! Non-intrusive model-order reduction for thermal reactor models.
//!
//! The pipeline learns a compact reduced model from full-order snapshot data:
//!
//! 1. [`fom`] produces snapshot trajectories from a 1D two-field reactor model.
//! 2. [`snapshots`] stacks, scales and persists them.
//! 3. [`pod`] extracts an orthonormal reduced basis by truncated SVD.
//! 4. [`deim`] reduces the pointwise Arrhenius source by empirical interpolation.
//! 5. [`opinf`] fits the polynomial operators by regularized least squares.
//! 6. [`calibrate`] refines them against whole trajectories with adjoint gradients.
//! 7. [`rom`] simulates, evaluates and serializes the resulting model.
//!
//! [`pipeline`] chains the stages behind the `romcal` command line tool.

pub mod calibrate;
pub mod deim;
pub mod error;
pub mod fom;
pub mod kv;
pub mod opinf;
pub mod pipeline;
pub mod pod;
pub mod rom;
mod sections;
pub mod snapshots;

pub use error::{Error, Result};
