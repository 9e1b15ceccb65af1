//! Core library for nullu: extraction of a low-rank "hallucination subspace"
//! from paired truthful/hallucinated hidden features, and null-space
//! projection edits of model weights that suppress it.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`] — dense matrices, deterministic SVD, subspaces, projectors,
//!   principal angles.
//! - [`toymodel`] — a small deterministic residual MLP stack used as the
//!   editing target in tests and demos.
//! - [`data`] — synthetic data generators (factor model, planted-bias corpus)
//!   and the binary container format used for all file I/O.
//! - [`pipeline`] — feature extraction, subspace fitting, and the edit loop.
//! - [`analysis`] — subspace decoding, projected-component statistics,
//!   token-frequency reports, and the DPO-gradient decomposition.
//! - [`verify`] — a self-check suite over the invariants of the above.

pub mod analysis;
pub mod data;
pub mod error;
pub mod linalg;
pub mod pipeline;
pub mod toymodel;
pub mod verify;

pub use error::{Error, Result};
