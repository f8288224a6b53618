//! Tokenizes 3D facial motion into discrete geometry tokens and aligns those
//! tokens with natural language in both directions.

pub mod app;
pub mod corpus;
pub mod error;
pub mod eval_suite;
pub mod face_model;
pub mod motion_lm;
pub mod nn;
pub mod text_codec;
pub mod vqvae;

pub use error::{Error, Result};
