//! Context-aware multi-object video instance association.
//!
//! The crate implements the full numerical pipeline for associating object
//! instances across video frames using the context around each object:
//!
//! - [`tensor`] / [`tape`]: dense `f64` arrays, 2-D filtering and a
//!   reverse-mode gradient tape shared by every trainable op;
//! - [`context`]: boundary-band pooling of instance surroundings and MLP
//!   fusion into context-aware embeddings;
//! - [`losses`]: Hungarian set matching, instance segmentation losses and the
//!   cross-frame contrastive terms, composed into the segmenter and tracker
//!   objectives;
//! - [`tracker`]: the context-aware cross-attention tracker with Hungarian
//!   context alignment;
//! - [`scenario`]: a deterministic synthetic video generator whose twin-object
//!   scenarios require contextual cues for correct identity tracking, plus
//!   association metrics;
//! - [`harness`]: training loops, the ablation runner and metrics persistence
//!   behind the `context-track` CLI.

pub mod config;
pub mod container;
pub mod context;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod scenario;
pub mod tape;
pub mod tensor;
pub mod tracker;

pub use error::{Error, Result};
