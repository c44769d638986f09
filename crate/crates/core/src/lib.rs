//! Strong-constraint 4DVAR on Lorenz96 and an end-to-end learned inversion
//! operator trained through the differentiable dynamics.

pub mod bench;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod neuralnet;
pub mod observation;
pub mod rng;
pub mod training;
pub mod variational;

pub use error::{Error, Result};
