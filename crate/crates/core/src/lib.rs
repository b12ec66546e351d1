//! Learned and heuristic trajectory similarity.

pub mod augment;
pub mod binfmt;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod geo;
pub mod grid;
pub mod io;
pub mod measures;
pub mod numerics;
pub mod search;
pub mod synth;

pub use error::{Error, Result};
