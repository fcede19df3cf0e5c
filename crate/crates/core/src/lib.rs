//! Hybrid CNN-transformer semantic segmentation with learnable class
//! prototypes as decoder queries.
//!
//! The crate is self-contained: a small autodiff tensor engine
//! ([`tensor`]), the segmentation model ([`model`]), its training loop
//! ([`train`]), and dataset tooling with evaluation metrics ([`data`]).

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck_suite;
pub mod model;
pub mod par;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
