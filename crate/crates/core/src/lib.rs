//! Branching Brownian motion with self-repulsion.
//!
//! The crate is organised around one model and several independent routes
//! to the same quantities:
//!
//! * [`analytics`] evaluates the closed forms of the simplified model
//!   (partition function, particle-number laws, first branching time) and of
//!   its universal small-penalty limit.
//! * [`qmgw`] samples the branching-time genealogy exactly as a
//!   quasi-Markov Galton-Watson tree, both at finite penalty and in the limit.
//! * [`fullbbm`] simulates spatial BBM on a time grid, accumulates the
//!   pairwise proximity penalty and produces importance-weighted estimates
//!   under the tilted path measure.
//! * [`fkpp`] solves the F-KPP equation with a time-dependent reaction term
//!   that governs the law of the rightmost particle.
//! * [`deathmodel`] covers the variant in which particles may also die.
//! * [`stats`] holds the goodness-of-fit machinery that binds samplers to
//!   closed forms, and [`suite`] runs the full acceptance battery.

pub mod analytics;
pub mod deathmodel;
pub mod error;
pub mod fkpp;
pub mod fullbbm;
pub mod params;
pub mod qmgw;
pub mod quad;
pub mod rng;
pub mod stats;
pub mod suite;

pub use error::{Error, Result};
pub use params::ModelParams;
pub use rng::StreamKey;
