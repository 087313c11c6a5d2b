//! Crash-consistent Path ORAM over a simulated non-volatile main memory.

pub mod block;
pub mod config;
pub mod controller;
pub mod crashlab;
pub mod error;
pub mod eviction;
pub mod experiment;
pub mod nvm;
pub mod posmap;
pub mod posmap_backend;
pub mod recovery;
pub mod stash;
pub mod stats;
pub mod trace;
pub mod tree;
pub mod wpq;

pub use controller::{Controller, OramConfig, PersistMode, Request};
pub use error::{OramError, Result};
