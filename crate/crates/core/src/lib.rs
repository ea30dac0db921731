//! Distilling in-context demonstrations into per-layer shift vectors for
//! harmful-meme intervention generation.
//!
//! The pipeline has three stages:
//!
//! 1. [`tagger`] predicts commonsense parameters for a meme from its features.
//! 2. [`retrieval`] selects `k` demonstrations per anchor (random, commonsense,
//!    image or combined retrieval).
//! 3. [`csv_trainer`] learns one shift vector and coefficient per layer so that the
//!    demonstration-free [`model`] reproduces the demonstration-conditioned one.
//!
//! [`inference`] generates interventions (including ablations and k-shot
//! baselines) and [`evaluation`] scores them and probes the learned shifts.

pub mod corpus;
pub mod csv_trainer;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod optim;
pub mod retrieval;
pub mod tagger;
pub mod tensor_io;

pub use error::{Error, Result};
