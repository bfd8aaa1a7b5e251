//! Dynamic neural matrix factorization of user content consumption.
//!
//! Users' per-period reading is embedded with fixed pretrained word vectors,
//! passed through a small recurrent network that emits a smoothed weighting
//! over `K` shared content attributes, and reconstructed as a convex
//! combination of the attribute vectors. The crate also carries the
//! evaluation protocol (retrieval, word intrusion, trajectory taxonomy,
//! ablations), transfer to new users and a synthetic panel generator with
//! known ground truth.

pub mod ablation;
pub mod checkpoint;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod stopwords;
pub mod synth;
pub mod training;
pub mod transfer;

pub use dataset::Dataset;
pub use error::{Error, Result};
