//! Logit quantal response equilibria of general-sum Markov games.
//!
//! The crate provides exact tabular machinery ([`game`]), reference QRE and
//! Nash solvers ([`oracle`]), entropy-regularized replicator dynamics and the
//! two-timescale actor-critic solver ([`dynamics`]), a retrace critic for
//! sampled trajectories ([`critic`]), continuous-action policies
//! ([`continuous`]), equilibrium diagnostics ([`metrics`]), rationality
//! calibration ([`calibration`]) and built-in scenarios ([`scenarios`]).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod calibration;
pub mod continuous;
pub mod critic;
pub mod dynamics;
pub mod error;
pub mod game;
pub mod io;
pub mod metrics;
pub mod numeric;
pub mod oracle;
pub mod rng;
pub mod scenarios;

pub use error::{Error, Result};
pub use game::{JointPolicy, MarkovGame, QEstimate, Rationality, SoftValueParams};
