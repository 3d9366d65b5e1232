//! Learnable series activations for small convolutional networks.
//!
//! The crate is a self-contained CPU toolkit: a tape-based autodiff engine
//! ([`tensor`]), CNN layers ([`nn`]), the series activation ([`series`]),
//! deploy-time reparameterisation ([`fusion`]), optimisers ([`optim`]),
//! dataset and checkpoint I/O ([`data`]), architecture builders
//! ([`networks`]), measurement tools ([`analysis`]) and the run-level
//! commands behind the command-line tool ([`commands`]).

pub mod analysis;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod series;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tape, Tensor, Var};
