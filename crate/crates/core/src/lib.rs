//! Offline goal-conditioned reinforcement learning through f-advantage regression.
//!
//! The crate is organised bottom-up: [`mdp`] defines finite goal-conditioned
//! MDPs, [`fdiv`] the divergences and their conjugates, [`occupancy`] the exact
//! occupancy measures used as ground truth, [`dataset`] offline data and
//! relabeling, [`tabular`] the closed-form solver, [`neural`] the function
//! approximation path, [`planner`] the action-free subgoal planner and
//! [`harness`] the experiment runner.

pub mod dataset;
pub mod error;
pub mod fdiv;
pub mod harness;
pub mod mdp;
pub mod neural;
pub mod occupancy;
pub mod planner;
pub mod tabular;

pub use error::{GofarError, Result};
