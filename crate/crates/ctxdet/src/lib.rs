//! Few-shot object detection on a synthetic benchmark, built around an
//! attention module that lets each prior box aggregate pooled "context
//! fields" from a preserved source-domain classifier before a lightweight
//! target-domain classifier is applied.
//!
//! The crate is self-contained: a small dense-tensor engine with reverse-mode
//! differentiation, SSD-style anchors and matching, a miniature detector, the
//! context attention module with its ablation variants, an incremental
//! (source + target) head, VOC-style evaluation, and a CLI for reproducible
//! experiments.

pub mod anchors;
pub mod config;
pub mod context;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod incremental;
pub mod rng;
pub mod runner;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
