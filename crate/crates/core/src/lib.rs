//! Layer-wise visual token compression for a small vision transformer.
//!
//! The crate provides a dense `f64` tensor with tape-based reverse-mode
//! differentiation, the token-grid transforms behind the patch merge layer,
//! a toy pre-norm ViT encoder that can compress after any block, an
//! analytic cost model with a latency harness, and a frozen-encoder
//! training loop for the merger.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod cost;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod pml;
pub mod report;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use grid::{avg_pool_oracle, CompressionRatio, TokenGrid};
pub use pml::{init_params, merge_forward, pml_forward, MergerVariant, PmlParams};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;
