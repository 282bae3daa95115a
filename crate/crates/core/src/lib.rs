//! Adaptive BDDC preconditioning for 2D elliptic problems with rough,
//! high-contrast coefficients, together with a small neural surrogate that
//! predicts the adaptive coarse space from the random-field parameters.
//!
//! The crate is organised bottom-up:
//!
//! * [`kernels`] — dense symmetric eigen/solve primitives everything else uses,
//! * [`grid`] — P1 finite elements on a structured triangulation of the unit square,
//! * [`decomp`] — non-overlapping subdomain partition and interface bookkeeping,
//! * [`schur`] — subdomain and edge Schur complements,
//! * [`adaptive`] — deluxe scaling, parallel sums and the per-edge eigenproblems
//!   that generate coarse constraints,
//! * [`bddc`] — change of basis, the BDDC preconditioner and PCG,
//! * [`stochastic`] — Karhunen-Loeve random coefficient fields,
//! * [`surrogate`] — multilayer perceptron plus scaled conjugate gradient training,
//! * [`pipeline`] — experiment configuration, dataset generation, evaluation
//!   harness and report emission (this is what the `bddc` binary drives).

pub mod adaptive;
pub mod bddc;
pub mod decomp;
mod error;
pub mod grid;
pub mod kernels;
pub mod pipeline;
pub mod schur;
pub mod stochastic;
pub mod surrogate;

pub use error::{Error, Result};
