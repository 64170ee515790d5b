//! Referring-expression grounding by reinforcement learning: an agent moves
//! and reshapes a bounding box over image features until it triggers, and
//! is trained with an asynchronous advantage actor-critic loop.

pub mod environment;
pub mod evaluator;
pub mod error;
pub mod geometry;
pub mod network;
pub mod observation;
pub mod refertoy;
pub mod reward;
pub mod trainer;

pub use error::{Error, Result};
