//! Malliavin calculus on a discretized Wiener space.
//!
//! Functionals are smooth maps of the Brownian increment matrix; derivatives
//! are exact derivatives of that map, obtained by forward-mode jets.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod estimate;
pub mod funcalc;
pub mod ibp;
pub mod jet;
pub mod localize;
pub mod nondegen;
pub mod quadrature;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod timegrid;
pub mod verify;

pub use error::{Error, Result};
