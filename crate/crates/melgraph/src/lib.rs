//! Graph-regularized training for lightweight audio classifiers.
//!
//! The pipeline: load a labeled manifest, turn each clip into a fixed-size
//! log-Mel spectrogram, obtain an embedding per sample from a large upstream
//! model (or the built-in toy extractor), connect samples whose embeddings
//! have cosine similarity above a threshold into a neighbor graph, then train
//! a small network whose loss is cross-entropy plus an `alpha`-weighted
//! penalty on the distance between the intermediate representations of
//! graph-adjacent samples.
//!
//! Each stage is usable on its own:
//!
//! ```
//! use melgraph::embedding::cosine_similarity;
//! let s = cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
//! assert!((s - 8.0 / 9.0).abs() < 1e-12);
//! ```
//!
//! The `melgraph` binary exposes the stages as subcommands (`manifest`,
//! `features`, `embed`, `graph`, `train`, `eval`, `compare`, `grid`,
//! `synth`); see the guide in `book/` for a walkthrough.

pub mod audio;
pub mod cli;
pub mod dataset;
pub mod embedding;
pub mod eval;
pub mod features;
pub mod graph;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod wav;

#[cfg(doctest)]
mod book;

pub use dataset::Manifest;
pub use graph::NeighborGraph;
pub use train::LossBreakdown;
