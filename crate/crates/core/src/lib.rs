//! Numerical laboratory for zero-sum stochastic differential games driven
//! by a controlled SDE-BSDE system: forward simulation, regression Monte
//! Carlo payoff solving, priority-value estimation over feedback classes,
//! weak dynamic-programming verification, envelope Hamiltonians, and a
//! monotone finite-difference solver for the associated fully non-linear
//! parabolic equation.

pub mod bsde_engine;
pub mod controls;
pub mod dpp_harness;
pub mod error;
pub mod game_values;
pub mod hamiltonians;
pub mod isaacs_pde;
pub mod mc_paths;
pub mod model;
pub mod registry;
pub mod sde_engine;

pub use error::{Error, Result};
