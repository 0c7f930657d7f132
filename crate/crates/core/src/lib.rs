//! Parallel-in-time training of GRU sequence classifiers.
//!
//! The hidden-state evolution of a (stacked) GRU is treated as a time
//! integrator and solved with multigrid reduction in time. Forward states and
//! adjoints are computed by multilevel cycles that can be spread over worker
//! lanes, each owning a contiguous chunk of the sequence.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod demo;
pub mod error;
pub mod grid;
pub mod gru;
pub mod mgrit;
pub mod numerics;
pub mod propagation;
pub mod runtime;
pub mod training;

pub use error::{Error, ProtocolFault, Result};
