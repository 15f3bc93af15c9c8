//! Curriculum data mixing for cross-language transfer.
//!
//! The crate covers the whole desk-scale pipeline: a linear task-mixture
//! schedule and the sampler that follows it, JSON-lines ingestion with the
//! dialogue template, full-sentence packing into fixed-length windows,
//! vocabulary extension with mean-initialized rows, a small k-gram neural LM,
//! synthetic bilingual corpora and the CLI drivers that tie them together.

pub mod ablate;
pub mod config;
pub mod error;
pub mod ingest;
pub mod matrix;
pub mod model;
pub mod packer;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
