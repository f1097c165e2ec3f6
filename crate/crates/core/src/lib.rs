//! Visually grounded paraphrase (VGP) extraction toolkit.
//!
//! Entities are noun phrases from an image's captions; entities describing
//! the same visual concept are paraphrases of each other. The crate computes
//! entity-pair similarities with several interchangeable models
//! (localization overlap, translation probability, embedding cosine, and a
//! supervised fusion network with image attention), clusters each image's
//! entities with affinity propagation, tunes the clustering preference and
//! the pairwise decision threshold on a validation split, and scores the
//! result against gold clusters.

pub mod align;
pub mod cca;
pub mod cluster;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod locsim;
pub mod optimize;
pub mod pipeline;
pub mod simnet;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
