//! Mix-Transformer semantic segmentation on a from-scratch autodiff engine.
//!
//! The crate covers the whole pipeline: tensors with reverse-mode gradients
//! ([`tensor`]), the hierarchical encoder ([`encoder`]) and All-MLP decoder
//! ([`decoder`]), class-balanced / OHEM losses ([`loss`]), AdamW with a
//! polynomial schedule ([`optim`]), data loading and augmentation
//! ([`data`]), metrics and cost accounting ([`eval`]), and the batch
//! commands behind the `mitseg` binary ([`app`]).

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod palette;
pub mod params;
pub mod tensor;
pub mod variants;

pub use error::{Error, Result};
pub use tensor::{Rng, Scalar, Tensor};

/// Number of evaluation classes.
pub const NUM_CLASSES: usize = 19;
