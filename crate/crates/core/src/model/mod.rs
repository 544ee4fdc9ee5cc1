//! Vocabulary and the small encoder–decoder VQA model.

mod toy;
mod vocab;

pub use toy::*;
pub use vocab::{Vocabulary, BOS, EOS, PAD};
