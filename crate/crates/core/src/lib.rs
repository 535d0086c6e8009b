//! Numerical laboratory for the thin obstacle (Signorini) problem.
//!
//! The crate solves the discrete variational inequality on a half-box and
//! evaluates radial monotonicity functionals, blowup fits, the partial
//! hodograph-Legendre transform, the nonlinear equation satisfied by the
//! Legendre transform, and Baouendi-Grushin operator diagnostics.
//!
//! Numerical kernels are generic over [`Real`]; the aliases below fix `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod blowup;
pub mod error;
pub mod field;
pub mod functionals;
pub mod grushin;
pub mod hodograph;
pub mod kdtree;
pub mod legendre;
pub mod profiles;
pub mod quadrature;
pub mod solver;
pub mod real;
pub mod runner;

pub use error::{Error, Result};
pub use real::Real;

pub type Grid = field::Grid<f64>;
pub type GridSpec = field::GridSpec<f64>;
pub type Field = field::ScalarField<f64>;
pub type Profile = profiles::BlowupProfile<f64>;
pub type Barrier = profiles::BarrierParams<f64>;
