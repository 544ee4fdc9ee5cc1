//! Helpers shared by several integration test targets.
#![allow(dead_code)]

pub mod grad;
pub mod memory;
pub mod oracles;
