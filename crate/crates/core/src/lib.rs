//! Differentiable quadrotor simulation and training of a vision-based gap
//! traversal policy.
//!
//! The pieces, bottom-up: [`dynamics`] integrates a collective-thrust /
//! body-rate quadrotor model, [`renderer`] generates gap scenes and ray-casts
//! depth images, [`policy`] is the recurrent network, [`losses`] the task
//! loss, [`trainer`] optimizes the policy by back-propagation through whole
//! rollouts, and [`eval`] runs the evaluation protocols.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod policy;
pub mod renderer;
pub mod sim;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
