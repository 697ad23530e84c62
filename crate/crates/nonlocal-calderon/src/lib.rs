//! Variable-coefficient nonlocal diffusion on a truncated 1D box: P1 Galerkin
//! assembly of the fractional Dirichlet form, θ-scheme solvers, exterior
//! Dirichlet-to-Neumann data and reconstruction experiments.

pub mod dn;
pub mod domain;
pub mod error;
pub mod harness;
pub mod inversion;
pub mod kernel;
pub mod quadrature;
pub mod solvers;

pub use error::{Error, Result};
