//! Federated dataset distillation by per-class gradient matching.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numerical piece:
//! the differentiable tape, the classifier family, data partitioning, the
//! client/server protocol, the distillation loop, DP-SGD and the convergence
//! bound evaluators. File formats and the command line live in the `distdd`
//! crate.

#![no_std]

extern crate alloc;

pub mod analysis;
pub mod data;
pub mod distill;
pub mod error;
pub mod flcore;
pub mod models;
pub mod numerics;
pub mod privacy;
pub mod rng;

pub use error::{Error, IdxError, Result};
