//! Single-bit KV-cache fault search on a small, bit-addressable
//! decoder-only transformer runtime.

pub mod bitflip;
pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod fault_model;
pub mod fixture;
pub mod kv_cache;
pub mod model;
pub mod report;
pub mod rng;
pub mod search;

pub use error::{Error, Result};
