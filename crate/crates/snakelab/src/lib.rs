//! Size-conditioned Bienaymé trees, discrete snakes built on them, and the
//! continuum objects they converge to.
//!
//! Trees are sampled through a bijection between edge-label sequences and
//! labelled ordered trees ([`linebreak`]). Encodings live in [`tree`],
//! displacement laws in [`displacements`], limit samplers in [`continuum`],
//! exact small-n checks in [`oracle`] and Monte Carlo experiments in [`stats`].

pub mod continuum;
pub mod displacements;
pub mod error;
pub mod linebreak;
pub mod oracle;
pub mod sampling;
pub mod stats;
pub mod tree;

pub use error::{Error, Result};
