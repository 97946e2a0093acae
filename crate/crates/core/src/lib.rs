//! Lifelong imitation learning with a progressive library of low-rank
//! experts mixed by a learned router over a frozen base policy.

pub mod autodiff;
mod bytes;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod library;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod router;
pub mod verify;
pub mod world;

pub use error::{Error, Result};
