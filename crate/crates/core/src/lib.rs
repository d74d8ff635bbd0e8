//! Masked position prediction pretraining for vision transformers.
//!
//! A transformer encoder receives patch tokens with no positional information,
//! lets only a random subset of tokens (the context) contribute keys and
//! values, and learns to classify every token's original grid position. The
//! pretrained encoder is then finetuned as an ordinary classifier.
//!
//! The crate is `no_std` (with `alloc`) so the numerical core stays free of IO.
//! The `std` feature only enables multi-threaded matmul kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod data;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod objective;
pub mod optim;
pub mod pretrain;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use kernels::{max_threads, set_max_threads};
pub use model::{ModelConfig, ModelParams, PeMode};
pub use real::Real;
pub use rng::Rng;
pub use tape::{Tape, TapeStats, Var};
pub use tensor::Tensor;
