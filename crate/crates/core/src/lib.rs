//! Adapters that map activation vectors into a frozen language model's
//! embedding space, with the training, evaluation and probing tools around them.

pub mod adapter;
pub mod error;
pub mod data;
pub mod lm;
pub mod train;
pub mod eval;
pub mod probe;

pub use adapter::{Adapter, AdapterInit, AdapterKind, ModelDims};
pub use error::{Error, Result};
