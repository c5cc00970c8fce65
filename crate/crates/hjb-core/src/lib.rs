//! Numerical laboratory for semilinear Cauchy problems with quadratic
//! gradient nonlinearity and their ergodic limits,
//!
//! ```text
//! d/dt v = F[v],    F[v](x) = 1/2 Tr(A D^2 v) + 1/2 (grad v)' Abar (grad v) + B' grad v + V,
//! lambda = F[vhat]  (ergodic pair (vhat, lambdahat)),
//! ```
//!
//! on vector domains and on the cone of symmetric positive definite matrices.
//! The crate provides coefficient families and operator evaluation
//! ([`coeffs`]), the matrix-domain calculus and its vector-coordinate
//! identification ([`matrixdom`]), Lyapunov/growth assumption checkers and
//! constructive synthesis ([`lyapunov`]), grid solvers for the Cauchy and
//! ergodic problems ([`pdesolve`]), and Monte Carlo verification of the
//! convergence functionals ([`stochsim`]).
//!
//! All numerics are generic over a floating-point [`Scalar`] (`f32` or
//! `f64`); the `*64` aliases below fix the default double-precision types.

pub mod coeffs;
pub mod error;
pub mod functions;
pub mod grid;
pub mod linalg;
pub mod lyapunov;
pub mod matrixdom;
pub mod pdesolve;
pub mod scalar;
pub mod stochsim;

pub use error::{HjbError, Result};
pub use scalar::Scalar;

/// Double-precision coefficient field.
pub type CoefficientField64 = coeffs::CoefficientField<f64>;
/// Double-precision grid.
pub type Grid64 = grid::Grid<f64>;
/// Double-precision grid field.
pub type GridField64 = grid::GridField<f64>;
/// Double-precision SPD cone point.
pub type SpdPoint64 = matrixdom::SpdPoint<f64>;
/// Double-precision matrix-domain coefficients.
pub type MatrixCoefficients64 = matrixdom::MatrixCoefficients<f64>;
/// Double-precision discrete operator.
pub type DiscreteOperator64 = pdesolve::DiscreteOperator<f64>;
/// Double-precision solution field.
pub type SolutionField64 = pdesolve::SolutionField<f64>;
/// Double-precision ergodic pair.
pub type ErgodicPair64 = pdesolve::ErgodicPair<f64>;
/// Double-precision simulation configuration.
pub type SimConfig64 = stochsim::SimConfig<f64>;
/// Double-precision path bundle.
pub type PathBundle64 = stochsim::PathBundle<f64>;
