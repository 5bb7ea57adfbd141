//! EEG graph encoding and archetype contrastive training.
//!
//! The crate builds EEG channel graphs (spatial and functional
//! connectivity), encodes windowed signals with a graph transformer that
//! uses Laplacian eigenvector positional encodings, and trains the encoder
//! with archetype contrastive objectives plus an alignment loss against
//! class embeddings. Everything runs on a small dense `f64` tensor core
//! with its own reverse-mode autodiff, so gradients are checkable against
//! finite differences end to end.
//!
//! Module map:
//! - [`tensor`]: matrices, symmetric eigensolver, autodiff tape.
//! - [`graph`]: electrode layouts, adjacency, normalized Laplacian,
//!   positional encodings.
//! - [`encoder`]: the graph transformer (embedding, attention, FFN,
//!   pooling) and model parameters.
//! - [`objectives`]: archetype bank and all training losses.
//! - [`data`]: synthetic datasets, windowing, file format, splits.
//! - [`eval`]: zero-shot classification, retrieval metrics, RSA, exports.
//! - [`trainer`]: optimization loop, checkpoints, ablation matrix.
//! - [`config`]: `key=value` configuration files.

pub mod config;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod graph;
pub mod objectives;
pub mod tensor;
pub mod trainer;
