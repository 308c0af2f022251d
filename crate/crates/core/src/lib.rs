//! Contraction analysis and simulation of nonlinear distributed systems.
//!
//! The library computes explicit stability certificates for
//! reaction-convection-diffusion dynamics of the form
//!
//! ∂φᵢ/∂t + hᵢ(Φ, ∇φᵢ, x, t) + pᵢ = ∇·Gᵢ(∇Φ, x, t)
//!
//! on rectangular 1-D/2-D grids, cross-checks them against empirically
//! measured convergence rates of discretized solutions, propagates
//! Hessians along Hamiltonian characteristics (a matrix Riccati flow),
//! builds optimal controllers and observers from that machinery, and
//! performs contraction-preserving Galerkin reduction.
//!
//! Module map:
//! - [`model`]: problem data (right-hand sides, derivatives, boundaries).
//! - [`grid`]: rectangular grids, upwind/centered operators, the upwind
//!   positive-semidefiniteness check.
//! - [`certificates`]: contraction rate certificates and metric transforms.
//! - [`dynamics`]: method-of-lines time integration and decay measurement.
//! - [`hamilton`]: characteristics, Riccati/inverse-Riccati propagation,
//!   Lie-derivative convexity conditions.
//! - [`optimal`]: HJB controller, optimal observer, LQ/Kalman oracles.
//! - [`galerkin`]: basis-function approximation with online basis edits.
//! - [`scenarios`]: built-in parameterized problem instances.

pub mod certificates;
pub mod dynamics;
pub mod error;
pub mod galerkin;
pub mod grid;
pub mod hamilton;
pub mod model;
pub mod optimal;
pub mod report;
pub mod scenarios;

pub use error::{Error, Result};
