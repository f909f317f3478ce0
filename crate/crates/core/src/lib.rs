//! Conditioning 2D segmentation networks on non-imaging vectors.
//!
//! The crate covers the whole pipeline: ACDC-layout ingestion and
//! preprocessing, conditioning vectors from label masks, U-Net and
//! encoder-decoder backbones with concatenation or FiLM fusion at one site,
//! focal-loss training with early stopping, volume Dice with paired
//! t-tests, and a resumable experiment grid with table reports.

pub mod conditioning;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod grid;
pub mod networks;
pub mod nn;
pub mod par;
pub mod seeding;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
