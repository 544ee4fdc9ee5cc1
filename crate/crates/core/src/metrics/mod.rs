//! Text-similarity metrics and continual-learning aggregates.

mod scores;
mod text;

pub use scores::*;
pub use text::*;
