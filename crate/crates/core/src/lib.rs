//! Continual spatio-temporal graph forecasting with an expand-and-compress
//! prompt pool.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every algorithmic
//! piece: the streaming graph model, windowed datasets, a small reverse-mode
//! differentiation engine, the STGNN backbone, the low-rank prompt pool, the
//! continual training engine with its baseline schemes, and the analysis
//! oracles. File formats, wall clocks and the command line live in the `eac`
//! companion crate.

#![no_std]

extern crate alloc;

pub mod analysis;
pub mod backbone;
pub mod data;
pub mod engine;
mod error;
pub mod graph;
pub mod linalg;
pub mod nn;
pub mod pool;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};

/// Library version recorded in reports and manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
