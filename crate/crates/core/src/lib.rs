//! Structural re-parameterization of multi-branch convolution blocks, with a
//! speaker-embedding pipeline built on top of it.
//!
//! Training-state blocks ([`blocks::RepBlock`]) hold several parallel
//! conv/BN branches; [`reparam::fuse_block`] folds them into a single
//! convolution that produces the same output. [`network`] assembles the
//! blocks into RepVGG-A style backbones with statistical pooling and an
//! embedding head, [`metrics`] scores verification trials, and [`io`] covers
//! the on-disk formats used by the `repspk` command-line tool.

pub mod blocks;
pub mod commands;
pub mod error;
pub mod io;
pub mod metrics;
pub mod network;
pub mod reparam;
pub mod tensor;

pub use error::{Error, Result};
