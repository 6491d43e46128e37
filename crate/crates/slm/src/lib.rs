//! Sleep models: sequence models over the five-class sleep-stage alphabet,
//! plus the decoding and evaluation machinery around them.
//!
//! A sleep model predicts the distribution of the next sleep stage from the
//! stages seen so far, exactly as a language model predicts the next word.
//! This crate provides:
//!
//! - count-based n-gram models with add-k smoothing and lower-order
//!   interpolation ([`ngram`]);
//! - a from-scratch LSTM model with a verified trainer ([`lstm`]);
//! - greedy decoding and beam-search fusion of a signal model's per-epoch
//!   likelihoods with a sleep-model prior ([`decoder`]);
//! - perplexity, accuracy and Cohen's kappa ([`metrics`]);
//! - a simulation fabric (Markov chains, higher-order sources, confusion
//!   channels) standing in for real recordings ([`simulator`]).
//!
//! All randomness is seeded and all model files are deterministic text, so
//! every pipeline built from these parts reruns byte-identically.

pub mod decoder;
pub mod error;
pub mod hypnogram;
pub mod likelihood;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod ngram;
pub mod simulator;
pub mod stage;

pub use error::{Error, Result};
pub use hypnogram::Hypnogram;
pub use likelihood::LikelihoodMatrix;
pub use model::{SequenceModel, UniformModel};
pub use stage::{SleepStage, StageDistribution, ALL_STAGES, STAGE_COUNT};
