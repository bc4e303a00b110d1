//! Arbitrary-order Taylor integrators for ODE initial value problems.
//!
//! The classical Taylor method advances `u' = f(u)` by summing the Taylor
//! polynomial of the solution, which requires the derivatives of `u` up to
//! the method order `R`. This crate implements both the exact route (total
//! derivatives of `f` composed through the Faa di Bruno formula) and an
//! approximate route that replaces every derivative of `f` beyond the first
//! with a centered finite-difference quotient of `f` itself, so only `f` and
//! its Jacobian are ever evaluated. Both routes come in explicit and
//! implicit flavors; the implicit ones solve the step equation with a Newton
//! iteration that exploits the near-lower-triangular block structure of the
//! system.
//!
//! Modules:
//!
//! * [`stencil`]: centered finite-difference weights for the p-th derivative
//!   with even accuracy order 2q.
//! * [`fdb`]: Faa di Bruno derivative sums over integer partitions and their
//!   partial derivatives (scalar case).
//! * [`block_newton`]: the small dense kernel (row-pivoted LU, block products)
//!   and the structured elimination used by the implicit solvers.
//! * [`exact_taylor`]: exact Taylor steppers; closed forms for linear scalar
//!   problems and a Newton solver for nonlinear scalar ones.
//! * [`approx_taylor`]: the approximate steppers for systems, explicit
//!   (`aet_*`) and implicit (`ait_*`).
//! * [`problems`]: the built-in test problem catalog and the registration
//!   interface for user problems.
//! * [`harness`]: convergence grids, error/order reports, CSV emission and
//!   method comparison.

pub mod approx_taylor;
pub mod block_newton;
pub mod error;
pub mod exact_taylor;
pub mod fdb;
pub mod harness;
pub mod problems;
pub mod stencil;

mod util;

pub use error::{Error, Result};
