//! Noise spectroscopy from dynamical-decoupling coherence measurements.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod forward;
pub mod inversion;
pub mod io;
pub mod nelder_mead;
pub mod quadrature;
pub mod rng;
pub mod scaling;
pub mod sequence;
pub mod simulator;
pub mod spectral;

pub use error::{Error, Result};
