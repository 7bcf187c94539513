//! Factual knowledge probing lab: a synthetic fact world with implanted
//! template-prior and object-likelihood biases, a tiny masked language model
//! trained from scratch, adapter tuning with max-entropy and true/false
//! self-augmentation objectives, and the bias/consistency metric suite.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod pipeline;
pub mod probing;
pub mod training;
pub mod world;

pub use error::{Error, Result};
