//! Joint task-performance / phrase-grounding evaluation toolkit.

pub mod alignhead;
pub mod datasets;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod par;
pub mod probe;
pub mod refgames;
pub mod sweep;
pub mod synthworld;
pub mod tensor;

pub use error::{Error, Result};
