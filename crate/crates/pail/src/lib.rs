//! An engine that learns operational action policies for fixed-horizon
//! industrial processes from trajectories labeled only with a terminal
//! sustainability score, without per-step rewards.
//!
//! The pipeline: a synthetic plant generates labeled trajectories; a
//! variational world model is pretrained and frozen; an attention policy is
//! then trained adversarially against a discriminator while a Q-learning
//! credit estimator distributes the terminal score across steps; learned
//! policies are scored with off-policy estimators against the plant's known
//! ground truth.

pub mod matrix;
pub mod rng;
pub mod checkpoint;
pub mod discriminator;
pub mod estimator;
pub mod nn;
pub mod plant;
pub mod policy;
pub mod simulator;
pub mod tape;
pub mod trainer;
pub mod trajectory;

mod error;

pub use error::{Error, Result};
