//! Contrastive unsupervised representations jointly trained with off-policy
//! reinforcement learning from pixels.
//!
//! The crate is `no_std` (with `alloc`). The `std` feature only switches the
//! GEMM backend to runtime CPU feature detection.
#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod agents;
pub mod augment;
pub mod contrastive;
pub mod envs;
pub mod error;
pub mod replay;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
