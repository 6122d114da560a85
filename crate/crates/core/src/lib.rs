//! Layer-wise local-error training lab.
//!
//! A small, dependency-light deep-learning stack built around one idea:
//! train a convolutional network block by block with local auxiliary
//! classifiers instead of end-to-end backpropagation, and pick block
//! hierarchies whose early stages are shallow so downsampling shrinks the
//! bulk of the convolutional work.

pub mod arch;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod global;
pub mod local;
pub mod network;
pub mod nn;
pub mod optim;
pub mod rng;

pub use error::{Error, Result};
