//! Self-guided masked autoencoders at desk scale.
//!
//! A masked-modeling trainer whose input masks are sampled from the
//! model's own first-layer attention map, together with the pieces it is
//! built from: a small reverse-mode tensor engine ([`ndtensor`]), byte and
//! continuous embeddings ([`embedding`]), multi-head self/cross attention
//! ([`attention`]), the attention-guided mask sampler ([`masker`]), the
//! end-to-end network and checkpoint format ([`model`]), optimization loops
//! ([`trainer`]) and dataset construction ([`data`]).

pub mod attention;
pub mod data;
pub mod embedding;
pub mod error;
pub mod masker;
pub mod model;
pub mod ndtensor;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
