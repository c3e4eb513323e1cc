//! Neural-operator model of battery temperature dynamics.
//!
//! A small multilayer perceptron approximates the time derivative of the
//! battery temperature from relative time and drive diagnostics. Training
//! supports three objectives: forward-difference regression, the same with a
//! smoothness penalty on input gradients, and a multi-step rollout loss that
//! backpropagates through the Euler recursion. Inference rolls the learned
//! derivative forward with explicit Euler steps.
//!
//! The crate also ships a lumped-cell thermal simulator for synthetic data and
//! an ordinary-least-squares surrogate relating temperature to charging
//! statistics.
//!
//! # Feature layout
//!
//! Model inputs are always ordered as
//! `[t_rel, power, speed, battery_level, outside_temp, battery_temp]`;
//! see [`dataset::feature`].

pub mod datagen;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod integrator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod surrogate;
pub mod sweep;
pub mod trainer;

pub mod cli;

pub use dataset::{Dataset, DriveSession, NormStats, Sample};
pub use error::{Error, Result};
pub use metrics::Metrics;
pub use nn::{AdamState, Gradient, MlpArch, MlpModel};
