//! Relation prediction for panoptic scene graphs: mask-gated object tokens,
//! a global-context transformer with a multi-head relation readout, focal
//! loss with EMA self-distilled soft labels, and the triplet-recall / PQ
//! evaluation protocol, over a synthetic scene corpus.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the CLI and checkpoints use.

mod codec;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod scalar;
pub mod scene;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Array = numeric::Array<f64>;
pub type Tape = numeric::Tape<f64>;
pub type RelationModel = model::RelationModel<f64>;
pub type RelationLogits = model::RelationLogits<f64>;
pub type ParamStore = model::ParamStore<f64>;
pub type TokenGrid = tokenizer::TokenGrid<f64>;
pub type TrainOutput = training::TrainOutput<f64>;

/// Short content hash identifying a corpus or checkpoint file.
pub fn fingerprint(bytes: &[u8]) -> String {
    format!("{:08x}", crc32fast::hash(bytes))
}
