//! File formats, corpora, experiment orchestration and the command line
//! for layer transplantation, on top of `transplant-core`.

pub mod checkpoint;
pub mod cli;
pub mod clock;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod io;

pub use error::{Error, Result};
pub use transplant_core as core;
