//! Face restoration from a learned codebook of high-quality feature priors.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]),
//! the codebook and its quantizer ([`dictionary`]), multi-head cross-attention
//! fusion ([`attention`]), the encoder/decoder pipelines ([`model`]), the
//! training objectives ([`losses`]), the synthetic degradation model
//! ([`degradation`]), evaluation metrics ([`metrics`]) and the training and
//! I/O plumbing ([`workbench`]).

pub mod error;
pub mod rng;
pub mod attention;
pub mod degradation;
pub mod dictionary;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod workbench;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Adam, AdamConfig, ParamStore, Params, Tape, Tensor, Var};
