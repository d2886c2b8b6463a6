//! Identifiable Markov switching models and switching dynamical systems.
//!
//! [`msm`] holds the discrete-regime prior over continuous latents with exact
//! inference; [`sds`] adds a piecewise-linear decoder and a variational encoder.
//! [`synthgen`] builds ground-truth benchmarks, [`metrics`] scores recovered
//! models against them and [`selection`] sweeps `K` and `M`.

pub mod cli;
pub mod error;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod msm;
pub mod nnet;
pub mod optim;
mod parallel;
pub mod rng;
pub mod sds;
pub mod selection;
pub mod synthgen;

pub use error::{Error, Result};
