//! Continuous-time sequence models for irregular, partially observed
//! longitudinal data.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense f64 tensors with a reverse-mode tape, MLPs, losses, Adam.
//! - [`interp`]: piecewise-cubic control signals over integer pseudo-time.
//! - [`odesolve`]: Euler, RK4 and Dormand–Prince solvers, differentiable
//!   through their own steps.
//! - [`preprocess`]: standardisation, padding, observation counts, the two
//!   causality transforms and minibatching.
//! - [`models`]: Neural CDE, ODE-RNN, Latent ODE, GRU-ODE and a discrete RNN.
//! - [`harness`]: CSV I/O, synthetic data, training, metrics, cross-validation
//!   and grid search.

pub mod harness;
pub mod interp;
pub mod models;
pub mod odesolve;
pub mod preprocess;
pub mod tensor;
