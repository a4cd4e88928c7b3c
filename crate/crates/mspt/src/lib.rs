//! Recommendation-reason generation from product content and customer Q&A.
//!
//! The model encodes a product's title and attribute words (Bi-LSTM +
//! self-attention), encodes its Q&A discussions with product-guided
//! attention, fuses the two through prior/posterior representations, and
//! decodes a short selling-point sentence. Training combines NLL, a KL
//! term that pulls the prior-conditioned decoder toward the
//! posterior-conditioned one, and a bag-of-words relevance term.
//!
//! Everything runs on the in-crate reverse-mode autodiff engine in
//! [`tensor`]; see the `book/` guide for a walkthrough of each stage.

pub mod config;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod data;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod qa;
pub mod tensor;

pub use error::{Error, Result};
