//! Independent numerical oracles for testing the hjb-core library.
//!
//! Everything here is written directly against the underlying mathematics
//! (ODE reductions, exact flows, exponential transforms) rather than against
//! library internals, so agreement between the two is evidence, not
//! tautology.

pub mod exact_flows;
pub mod linear_pde;
pub mod riccati;
