//! Weakly supervised answer generation.
//!
//! This crate trains a small sequence-to-sequence answer generator purely
//! from the signal of a discriminative answer-ranking scorer: the scorer
//! ranks the candidate answers of each question, the top candidate becomes
//! the generation target and the next `k` candidates become the input
//! context. On top of that baseline the crate implements score-weighted
//! losses, confidence-bucket conditioning of inputs and outputs, constrained
//! beam decoding, scorer-based checkpoint selection and the evaluation
//! machinery needed to measure all of it against a synthetic QA world with
//! known ground truth.
//!
//! The numeric core (model, trainer, decoder) is generic over the scalar
//! type; `f32` is the practical choice for training runs and `f64` for
//! verification. Concrete aliases live at the crate root.

pub mod corpus;
pub mod decoder;
pub mod evaluator;
pub mod experiments;
pub mod model;
pub mod scalar;
pub mod scorer;
pub mod shaping;
pub mod trainer;

mod stablehash;

pub use scalar::Scalar;

/// Model parameters at training precision.
pub type Params32 = model::Parameters<f32>;
/// Model parameters at verification precision.
pub type Params64 = model::Parameters<f64>;
/// Checkpoint at training precision.
pub type Checkpoint32 = model::checkpoint::Checkpoint<f32>;
/// Checkpoint at verification precision.
pub type Checkpoint64 = model::checkpoint::Checkpoint<f64>;
