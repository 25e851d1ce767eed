//! Incremental deep active inference agents on a dSprites-style gridworld.
//!
//! The crate is organized bottom-up: [`autodiff`] and [`distributions`] are
//! the numeric substrate, [`env`] the task, [`nets`] the network roles,
//! [`objectives`] every loss and expected-free-energy estimator, and
//! [`agent`] the action-perception loop tying them together. [`mcts`],
//! [`cka`] and [`tabular`] are analysis tools used on trained agents.

pub mod autodiff;
pub mod distributions;
pub mod env;
pub mod nets;
pub mod objectives;
pub mod agent;
pub mod mcts;
pub mod cka;
pub mod tabular;
pub mod config;
