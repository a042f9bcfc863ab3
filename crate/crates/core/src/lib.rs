pub mod cli;
pub mod data;
pub mod dsp;
pub mod error;
pub mod faster;
pub mod models;
pub mod nnengine;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
