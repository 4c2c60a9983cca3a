//! Heterogeneous bimodal attention fusion for emotion recognition in
//! conversation, built over precomputed per-utterance audio and text features.

pub mod audio_context;
pub mod autograd;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod feature_store;
pub mod fusion;
pub mod nn;
pub mod params;
pub mod text_context;
pub mod train_eval;

pub use error::{HbafError, Result};
