//! Lyapunov certificate synthesis for uncertain dynamical systems.
//!
//! Provides sum-of-squares certificate search compiled to semidefinite
//! programs, a neural-network Lyapunov candidate trainer, distributionally
//! robust (Wasserstein-ball) constraint machinery, and a Monte Carlo
//! validation harness for candidates under shifted online disturbance
//! distributions.

pub mod bench;
pub mod candidate;
pub mod cli;
pub mod nnlf;
pub mod poly;
pub mod sdp;
pub mod sos;
pub mod synth;
pub mod uncertainty;
pub mod validate;
