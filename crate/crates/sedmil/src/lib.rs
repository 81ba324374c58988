//! Weakly-supervised polyphonic sound event detection as multiple
//! instance learning.
//!
//! An audio clip is a bag of frames with clip-level (weak) labels only.
//! A feature encoder maps each clip to a sequence of high-level frame
//! representations, a pooling module aggregates them — either frame
//! probabilities (instance level) or representations themselves
//! (embedding level) — and a per-class classifier produces clip
//! probabilities trained with binary cross entropy. Frame-level
//! predictions come from a decision surface (the clip classifier reused
//! framewise, or the specialized surface built from attention weights),
//! are smoothed with class-adaptive median filters and scored with
//! collared event-based F1.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`numerics`]: dense tensors, reverse-mode differentiation and a
//!   finite-difference gradient checker
//! - [`encoder`]: feature encoders (identity / MLP / CNN with batch norm)
//! - [`pooling`]: the eight pooling modules (instance- and
//!   embedding-level GMP/GAP/GSP/ATP)
//! - [`decision`]: clip classifier, shared and specialized decision
//!   surfaces, thresholded prediction rules
//! - [`disentangle`]: per-class feature subspace allocation from
//!   co-occurrence statistics
//! - [`postprocess`]: adaptive median-filter smoothing and event
//!   extraction
//! - [`metrics`]: clip-level tagging F1 and collared event-based F1
//! - [`data`]: dataset manifests, file formats and a synthetic bag
//!   generator
//! - [`model`]: assembles encoder, pooling and classifier into one
//!   differentiable model
//! - [`trainer`]: Adam, learning-rate decay, early stopping, checkpoints
//! - [`cli`]: the `sedmil` command-line entry point

pub mod cli;
pub mod data;
pub mod decision;
pub mod disentangle;
pub mod encoder;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pooling;
pub mod postprocess;
pub mod trainer;

pub use data::{Event, EventList};
pub use numerics::tensor::Tensor;
