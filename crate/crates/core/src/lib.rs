//! Online learning for deep stacks of linear recurrent units.
//!
//! Each LRU layer carries forward-mode sensitivity traces of its recurrent
//! parameters, so a step-local error signal obtained by backpropagating through
//! depth (but not time) yields the exact gradient for a single layer and a
//! cheap, biased estimate for deeper stacks. Baselines (spatial only, one-step
//! truncation) and a BPTT oracle share the same network code.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod learning;
pub mod lru;
pub mod network;
pub mod numerics;
pub mod optim;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
pub use learning::{GradientEstimate, GradientOptions, RuleKind};
pub use network::{ModelConfig, Network};
