//! Enhancement of binary function embeddings with external-environment
//! context.
//!
//! The pipeline: a [`corpus`] of binaries is reduced to per-binary
//! [`corpus::RelationIndex`]es; every function gets a typed, depth-bounded
//! context graph ([`eesg`]); initial node embeddings come from
//! [`embed`] providers and are projected into one space by [`whitening`];
//! a relational graph network with a residual path ([`sem`]) produces the
//! enhanced embedding; [`simcombine`] merges embedding and data-feature
//! similarities. [`train`] fits the model, [`eval`] measures retrieval.

pub mod artifact;
pub mod checkpoint;
pub mod corpus;
pub mod eesg;
pub mod embed;
pub mod encode;
pub mod error;
pub mod eval;
pub mod sem;
pub mod simcombine;
pub mod train;
pub mod whitening;

pub use error::{Error, Result};

/// Format version stamped into produced artifacts and run manifests.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
