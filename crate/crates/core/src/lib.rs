//! Speech recognition toolkit built around a convolutional attention-based
//! encoder-decoder, with its own reverse-mode autodiff core.
//!
//! Everything runs in double precision on the CPU. Heavy kernels are
//! data-parallel via rayon (the default `parallel` feature) with a
//! bit-identical sequential fallback.

pub mod autodiff;
pub mod features;
pub mod error;
pub mod kernels;
pub mod checkpoint;
pub mod data;
pub mod decoding;
pub mod evaluation;
pub mod layers;
pub mod seq2seq;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
