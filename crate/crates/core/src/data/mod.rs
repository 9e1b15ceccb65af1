//! Synthetic data generation and on-disk serialization.
//!
//! - [`container`] — the versioned, checksummed binary container used for
//!   every artifact the tooling reads or writes.
//! - [`factor`] — paired features drawn from a planted two-factor model
//!   with a known ground-truth subspace.
//! - [`corpus`] — a planted-bias token corpus over a [`crate::toymodel`]
//!   model whose hallucinated continuations over-emit designated tokens.
//! - [`schema`] — named-entry conventions for storing models, corpora,
//!   features, and subspaces inside containers.

pub mod container;
pub mod corpus;
pub mod factor;
pub mod schema;

pub use container::{Blob, Container};
pub use corpus::{
    build_planted_bias_corpus, CorpusPair, PairedCorpus, PlantedBiasSpec, PlantedCorpusBundle,
};
pub use factor::{
    generate_factor_pairs, orthonormal_rowspace, random_subspace, random_unit_vector,
    FactorModelSpec, PairedFeatureSet,
};
