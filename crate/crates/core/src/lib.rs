//! Desk-scale generative recommendation: items carry short semantic-ID
//! token tuples, a dual-encoder/shared-decoder model generates the next
//! item's tokens, and three add-ons target the classic failure modes —
//! contrastive alignment of the language and ID views, scheduled semantic
//! substitution against exposure bias, and retrieval-augmented decoding
//! for long-tail items.

pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod experiments;
pub mod nn;
pub mod retrieval;
pub mod semid;
pub mod textembed;
pub mod trainer;
pub mod transformer;
pub mod util;

pub use error::{Error, Result};
