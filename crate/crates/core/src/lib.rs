//! Stochastic Nash equilibrium seeking with deceptive players in quadratic
//! games.
//!
//! Players measure only their own cost and climb down a gradient estimate
//! obtained from Ornstein–Uhlenbeck dithers. A deceptive player also adds a
//! scaled copy of its victims' dithers to its own action, which shifts the
//! point the victims' estimates converge to. The crate covers the game model
//! ([`game`]), the dithers ([`perturbation`]), the frozen-gain analysis
//! ([`deception`]), the closed-loop and averaged dynamics ([`dynamics`]) and
//! seeded Monte Carlo batches ([`experiment`]). [`config`] reads and writes
//! the JSON scenario files used by the command-line tool.

pub mod config;
pub mod deception;
pub mod dynamics;
pub mod experiment;
pub mod game;
pub mod linalg;
pub mod perturbation;
pub mod quadrature;

pub use deception::{Deceiver, DeceptionStructure};
pub use game::{PlayerCost, PlayerTuning, QuadraticGame};
pub use perturbation::{DitherFunction, OuParams};
