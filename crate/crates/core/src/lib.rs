//! Core library for `conflictlens`: a desk-scale workbench for studying how a
//! small two-stream transformer resolves conflicting image/caption inputs.
//!
//! The crate is organized around the pipeline it supports:
//!
//! - [`numerics`] — deterministic dense linear algebra, losses, Adam, a
//!   seedable PRNG, and a finite-difference gradient oracle.
//! - [`model`] — the trainable TinyVLM transformer with activation capture
//!   and per-head output-scaling hooks.
//! - [`conflictgen`] — synthetic datasets, conflicting image/caption pairs,
//!   prompt encoding, CIFAR-10 binary ingestion, and behavioral scoring.
//! - [`probelab`] — linear probes over cached activations, including the
//!   three-fold ID/OOD/SID class-split evaluation.
//! - [`saliencelab`] — K-Means clustering, V-Measure, salience gaps, and
//!   gap/accuracy correlation.
//! - [`intervene`] — α-sweeps over attention heads, head-type
//!   classification, ranking, and cross-dataset transfer evaluation.

pub mod conflictgen;
pub mod intervene;
pub mod model;
pub mod numerics;
pub mod probelab;
pub mod saliencelab;

pub use conflictgen::{BehavioralBreakdown, ClassSet, ConflictPair, EncodedPrompt, Modality};
pub use model::{ForwardTrace, HeadInterventionSpec, ModelConfig, TinyVlm};
pub use numerics::{AdamState, Mat, Rng};
