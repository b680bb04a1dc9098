//! Concept-aware alignment of image and GPS embeddings.
//!
//! Image embeddings and encoded coordinates are aligned with a contrastive objective while both
//! are projected onto a basis of named concepts. The crate covers training, retrieval-based
//! geo-localization, concept analytics, a synthetic world for end-to-end checks, and the
//! binary/JSON formats shared with external tooling.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod concepts;
pub mod encoder;
pub mod error;
pub mod geo;
pub mod inference;
pub mod interpret;
pub mod io;
pub mod losses;
pub mod numkernel;
pub mod params;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
