//! Numerical laboratory for the parabolic Anderson model
//! `∂u/∂t = κΔu + ξu` on finite lattice boxes with i.i.d. potential.
//!
//! The crate covers the potential law and its tail calculus, lattice
//! operators and spectra, three independent solvers, the scaling functions
//! of the stable-limit and strong-law regimes, the limiting stable laws,
//! and seeded experiment harnesses with a command-line front end.

// `!(x > 0.0)` style guards deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod experiments;
pub mod krylov;
pub mod lattice;
pub mod potential;
pub mod quadrature;
pub mod rng;
pub mod scalings;
pub mod solver;
pub mod stable_law;
pub mod surrogate;

pub use error::{Error, Result};
