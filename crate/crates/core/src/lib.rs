//! Language models over normalized x86-64 instructions.
//!
//! The pipeline runs in stages, each usable on its own:
//!
//! 1. [`ingest`] reads disassembled functions (JSONL records or Intel-syntax
//!    listings).
//! 2. [`normalizer`] rewrites every instruction into one token.
//! 3. [`corpus`] filters functions, builds the vocabulary, encodes token
//!    sequences and assembles labeled datasets.
//! 4. [`encoder`] pre-trains a masked-language-model transformer encoder.
//! 5. [`heads`] fine-tunes similarity and toolchain classifiers on top of it.
//! 6. [`metrics`] scores the predictions.
//!
//! [`pipeline`] wires the stages to files for the `binsem` command-line tool.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod ingest;
pub mod metrics;
pub mod normalizer;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
