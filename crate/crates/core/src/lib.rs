//! In-situ domain-shift adaptation for streaming image classification.
//!
//! The crate implements the full on-device loop: a stream of timestamped
//! camera events is classified by a frozen-featurizer model, background and
//! class-distribution drift detectors watch the stream, a validation gate
//! estimates the accuracy impact of detected drift on synthesized data, and
//! the classifier head is fine-tuned on freshly composited images only when
//! the gate confirms a drop. A deterministic replay simulator exercises the
//! loop end to end with per-component energy accounting.
//!
//! Modules:
//! - [`corpus`]: image/object/stream data model, manifest ingestion, and the
//!   procedural scenario generator used for desk-scale experiments.
//! - [`synthesis`]: background-aware compositing (location / herd / time
//!   policies) plus MixUp and CutMix baselines.
//! - [`drift`]: LSDD two-sample permutation test over background pixels and a
//!   chi-squared monitor over prediction counts.
//! - [`validation`]: cached accuracy estimation gating fine-tunes against
//!   `acc_ref - thr`.
//! - [`model`]: seeded random-filter featurizer with a trainable
//!   normalization + linear head and mini-batch SGD.
//! - [`sim`]: event-driven replay, baselines, sweeps, metrics, and energy.

pub mod corpus;
pub mod drift;
pub mod model;
pub mod rng;
pub mod sim;
pub mod synthesis;
pub mod validation;
