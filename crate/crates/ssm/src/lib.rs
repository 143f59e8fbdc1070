//! # ssm
//!
//! Desk-scale bidirectional learning of facial action units (AUs) and
//! dynamic facial expressions (FEs) through structured semantic mapping:
//! FACS-derived prior matrices, textual semantic prototypes with learnable
//! context, dynamic bidirectional prior mapping with residual enhancement,
//! an MoE-augmented shared trunk, joint prototype-similarity losses, and a
//! deterministic experiment runner over synthetic heterogeneous data.
//!
//! Everything is built on a small reverse-mode tape with 64-bit floats,
//! and every gradient path is verified against an independent
//! finite-difference oracle. See the `book/` directory for a guided tour.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod dpm;
pub mod error;
pub mod facs;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod trainer;
pub mod tsp;

pub use error::{Error, Result};

// The guide's code blocks double as doc-tests, so the book can never
// drift from the crate. mdbook itself does not compile snippets against
// dependencies; these hidden modules make `cargo test` do it instead.
#[doc = include_str!("../../../book/src/overview.md")]
#[doc(hidden)]
pub mod _guide_overview {}
#[doc = include_str!("../../../book/src/autodiff.md")]
#[doc(hidden)]
pub mod _guide_autodiff {}
#[doc = include_str!("../../../book/src/facs.md")]
#[doc(hidden)]
pub mod _guide_facs {}
#[doc = include_str!("../../../book/src/world.md")]
#[doc(hidden)]
pub mod _guide_world {}
#[doc = include_str!("../../../book/src/prototypes.md")]
#[doc(hidden)]
pub mod _guide_prototypes {}
#[doc = include_str!("../../../book/src/mapping.md")]
#[doc(hidden)]
pub mod _guide_mapping {}
#[doc = include_str!("../../../book/src/trunk.md")]
#[doc(hidden)]
pub mod _guide_trunk {}
#[doc = include_str!("../../../book/src/training.md")]
#[doc(hidden)]
pub mod _guide_training {}
#[doc = include_str!("../../../book/src/cli.md")]
#[doc(hidden)]
pub mod _guide_cli {}
#[doc = include_str!("../../../book/src/ablations.md")]
#[doc(hidden)]
pub mod _guide_ablations {}
