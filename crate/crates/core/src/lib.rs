//! Sparse coding with classical and unrolled shrinkage solvers.
//!
//! The crate covers the full loop: synthetic conditioned dictionaries and
//! sparse signals ([`problem`]), proximal primitives ([`prox`]), ISTA and the
//! extragradient method ([`classical`]), their unrolled counterparts LISTA and
//! ELISTA ([`unrolled`]), stage-wise training by exact backpropagation
//! ([`training`]), benchmarking ([`eval`]), and robust photometric stereo
//! ([`stereo`]). Runs are described by a TOML [`config`], orchestrated by
//! [`experiment`], and persisted through the binary archives and CSV writers
//! in [`io`]. All randomness flows from seeds through [`rng`].

pub mod classical;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod problem;
pub mod prox;
pub mod rng;
pub mod stereo;
pub mod training;
pub mod unrolled;

pub use error::{Error, Result};
