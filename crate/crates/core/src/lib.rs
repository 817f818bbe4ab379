//! Strong-local / weak-global adversarial feature alignment for adapting a
//! small one-stage detector across domains.
//!
//! The crate is self-contained: a reverse-mode tensor engine ([`tensor`]),
//! the alignment losses ([`losses`]), the detector and domain classifiers
//! ([`nn`]), synthetic two-domain datasets ([`data`]), the min-max trainer
//! ([`train`]) and detection metrics ([`eval`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod nn;
pub mod swdt;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{backward, Element, Tensor};
