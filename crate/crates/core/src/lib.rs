//! Desk-scale laboratory for component-wise hallucination analysis of
//! LLaVA-style vision-language models, operating on embedding data.

pub mod benchgen;
pub mod datagen;
pub mod datastore;
pub mod error;
pub mod eval_harness;
pub mod losses;
pub mod numerics;
pub mod probes;
pub mod projector;
pub mod trainer;

pub use error::{LabError, Result};
