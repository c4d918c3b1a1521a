pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod teacher;
pub mod transformer;

pub use error::{Error, Result};
