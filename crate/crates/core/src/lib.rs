//! Engine for a generative, text-based recommender at desk scale.
//!
//! The crate is organized around one seq2seq-masked transformer: user context
//! is encoded bidirectionally, candidates/continuations autoregressively, and
//! everything downstream (tuning, segment caching, compression, retrieval,
//! zero-shot scoring) reuses that single forward definition.

pub mod adapt;
pub mod autodiff;
pub mod checkpoint;
pub mod compress;
pub mod error;
pub mod late;
pub mod latency;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod retrieval;
pub mod synth;
pub mod text;
pub mod train;
pub mod scalar;
pub mod zeroshot;

pub use autodiff::{MaskMat, Mat, NodeId, Tape};
pub use error::{Error, Result};
pub use scalar::Scalar;
