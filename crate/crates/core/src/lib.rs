//! Coupled neural, cognitive and behavioral learning dynamics in tabular Markov
//! games, with equilibrium diagnostics and log-based estimation.

// `!(x > 0.0)` style checks are there to reject NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod equilibrium;
pub mod error;
pub mod estimation;
pub mod game;
pub mod mdp;
pub mod rng;
pub mod scenarios;
pub mod sim;

pub use error::{MieError, Result};
