//! Reflexive world models: a frozen base policy plus a learned forward model
//! whose predictions act as implicit reference trajectories, and a lightweight
//! reflex controller adapted online by sign-inverted gradients through the
//! model so that observed dynamics keep matching predictions under actuator
//! perturbations.
//!
//! Crate layout follows the pipeline:
//!
//! - [`diffnet`]: minimal dense networks with reverse-mode input/parameter
//!   gradients and an Adam optimizer.
//! - [`envs`]: deterministic desk-scale plants (2D point mass, linear testbed).
//! - [`baseline`]: frozen base policies (scripted PD or CEM-trained network)
//!   and the thresholded quadratic action cost.
//! - [`worldmodel`]: the forward model, its prediction loss, replay buffer,
//!   and phase-1 training.
//! - [`reflex`]: the online reflex controller (parametric and analytic forms).
//! - [`perturb`]: actuator-gain perturbation schedules.
//! - [`theory`]: constant estimation and empirical verification of the error
//!   and value bounds, plus the linear testbed runner.
//! - [`harness`]: config-driven experiments, metrics, stats, plots, CLI glue.

pub mod baseline;
pub mod diffnet;
pub mod envs;
pub mod error;
pub mod fdcheck;
pub mod harness;
pub mod perturb;
pub mod reflex;
pub mod rng;
pub mod theory;
pub mod worldmodel;

pub use error::{Error, Result};
