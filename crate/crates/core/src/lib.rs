//! Imbalance-robust softmax losses for embedding learning.
//!
//! The crate is organized bottom-up: [`numerics`] primitives, the loss heads
//! in [`losses`], class-center prototypes in [`centers`], a small MLP
//! embedder in [`model`], datasets in [`data`], open-set metrics in
//! [`eval`], and the config-driven experiment runner in [`experiment`].

pub mod centers;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, IdxError, Result};
