//! Streaming multi-view 3D detection at desk scale.
//!
//! The crate implements an object-centric temporal detector: a query-based
//! decoder whose past outputs are kept in a small FIFO memory and re-entered
//! as extra attention keys and as propagated queries, with geometry-exact
//! frame alignment and motion-conditioned layer normalization. Around it sit
//! the pieces needed to study the idea end to end without real sensors: a
//! deterministic scene simulator standing in for an image backbone, set-based
//! training (Hungarian matching, focal + L1 losses) over streaming windows,
//! center-distance average-precision evaluation with a moving/static split, a
//! greedy tracker, latency benchmarks against warp/concat/recurrent BEV and
//! perspective-style temporal baselines, and a CLI driving all of it.
//!
//! Everything is f64 and seeded: identical inputs and parameters produce
//! bit-identical outputs.

pub mod assign;
pub mod bench;
pub mod cli;
pub mod engine;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod memory;
pub mod mln;
pub mod paradigms;
pub mod selfcheck;
pub mod sim;
pub mod tensor;
pub mod track;
pub mod train;

pub use error::{Error, Result};

/// Entry point for the `streamdet` binary; returns the process exit code.
pub fn cli_main() -> i32 {
    let args: Vec<String> = std::env::args().skip(1).collect();
    cli::dispatch(&args)
}
